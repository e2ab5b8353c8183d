//! Episodic training and evaluation.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    attention_difference, episode_alignment_losses, split_pairs, total_loss, AlignmentConfig,
    AttentionDifference,
};
use crate::autodiff::{BatchStats, Graph, Var};
use crate::episode::{sample_episode, Dataset, Episode, EpisodeSpec, Split};
use crate::heads::{
    argmax_rows, class_mean_maps, matchingnet_logp, metric_classification_loss, protonet_logp,
    prototypes, relation_logp, relation_mse_loss, relationnet_scores, HeadKind, Reduction,
    RelationVars,
};
use crate::model::{AblationFlags, BatchEmbedding, Model, ModelConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::Grads;
use crate::tensor::Tensor;
use crate::{math, Error, Result};

/// Salt mixed into the run seed for the validation episode stream.
const VALIDATION_SALT: u64 = 0x5eed_0f_7a11d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Training episodes; the split field is ignored (training always draws
    /// from the seen classes).
    pub episode: EpisodeSpec,
    pub episodes_per_batch: usize,
    pub total_episodes: usize,
    pub optimizer: AdamConfig,
    pub alignment: AlignmentConfig,
    pub ablation: AblationFlags,
    pub seed: u64,
    /// Validate and consider a new best checkpoint every this many episodes.
    pub validation_every: usize,
    pub validation_episodes: usize,
    pub eval_episodes: usize,
    pub loss_reduction: Reduction,
    /// Random left-right flips of training images.
    pub augment_flip: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            episode: EpisodeSpec::default(),
            episodes_per_batch: 4,
            total_episodes: 2000,
            optimizer: AdamConfig::default(),
            alignment: AlignmentConfig::default(),
            ablation: AblationFlags::default(),
            seed: 0,
            validation_every: 200,
            validation_episodes: 100,
            eval_episodes: 600,
            loss_reduction: Reduction::Sum,
            augment_flip: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_episodes < 1 {
            return Err(Error::config("total_episodes must be ≥ 1"));
        }
        if self.episodes_per_batch < 1 {
            return Err(Error::config("episodes_per_batch must be ≥ 1"));
        }
        if self.validation_every < 1 {
            return Err(Error::config("validation_every must be ≥ 1"));
        }
        self.episode.validate()?;
        self.alignment.validate()?;
        self.model.backbone.output_shape()?;
        Ok(())
    }

    pub fn train_spec(&self) -> EpisodeSpec {
        self.episode.with_split(Split::Seen)
    }
}

/// Scalar results of one episode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub loss: f64,
    pub l_mbc: f64,
    pub l_cas: f64,
    pub l_sas: f64,
    pub attn_diff: AttentionDifference,
    pub correct: usize,
    pub n_query: usize,
}

impl EpisodeStats {
    pub fn accuracy(&self) -> f64 {
        if self.n_query == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.n_query as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub stats: EpisodeStats,
    /// Present when gradients were requested.
    pub grads: Option<Grads>,
    /// Batch-norm statistics of the episode batch (training mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
    /// `Q×N` log-probabilities.
    pub logp: Tensor,
}

/// How an episode is run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    /// Batch statistics in batch norm (otherwise running averages).
    pub training: bool,
    /// Run the self-guided branch on supports too (alignment and attention
    /// difference need it).
    pub dual: bool,
    pub grads: bool,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode {
        training: true,
        dual: true,
        grads: true,
    };
    pub const EVAL: ForwardMode = ForwardMode {
        training: false,
        dual: true,
        grads: false,
    };
}

fn concat_outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::shape("support and query images differ in shape"));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

/// Graph nodes of a forward pass over one episode.
pub struct EpisodeGraph {
    pub support: BatchEmbedding,
    pub query: BatchEmbedding,
    pub logp: Var,
    pub l_mbc: Var,
    pub l_cas: Var,
    pub l_sas: Var,
    pub loss: Var,
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// Builds the full episode loss. Supports take the attributes-guided branch
/// (plus the self-guided one when `dual`), queries the self-guided branch;
/// query attributes are never read.
pub fn build_episode_graph(
    g: &mut Graph,
    model: &Model,
    bound: &crate::params::Bound,
    ep: &Episode,
    alignment: &AlignmentConfig,
    reduction: Reduction,
    mode: ForwardMode,
) -> Result<EpisodeGraph> {
    let s = ep.n_support();
    let q = ep.n_query();
    let images = g.constant(concat_outer(&ep.support_images, &ep.query_images)?);
    let (feats, bn_stats) = model.backbone_forward(g, bound, images, mode.training)?;
    let sup_idx: Vec<usize> = (0..s).collect();
    let q_idx: Vec<usize> = (s..s + q).collect();
    let sup_feats = g.gather(feats, &sup_idx)?;
    let q_feats = g.gather(feats, &q_idx)?;
    let attrs = g.constant(ep.support_attributes.clone());
    let support = model.embed_batch(g, bound, sup_feats, Some(attrs), mode.dual)?;
    let query = model.embed_batch(g, bound, q_feats, None, false)?;

    let (logp, l_mbc) = match model.config.head {
        HeadKind::Protonet => {
            let protos = prototypes(g, support.vecs, &ep.support_labels, ep.n_way)?;
            let logp = protonet_logp(g, query.vecs, protos)?;
            let l = metric_classification_loss(g, logp, &ep.query_labels, reduction)?;
            (logp, l)
        }
        HeadKind::Matching => {
            let logp = matchingnet_logp(g, query.vecs, support.vecs, &ep.support_labels, ep.n_way)?;
            let l = metric_classification_loss(g, logp, &ep.query_labels, reduction)?;
            (logp, l)
        }
        HeadKind::Relation => {
            let rv = RelationVars::from_bound(bound)?;
            let class_maps = class_mean_maps(g, support.maps, &ep.support_labels, ep.n_way)?;
            let scores = relationnet_scores(g, &rv, query.maps, class_maps)?;
            let l = relation_mse_loss(g, scores, &ep.query_labels, reduction)?;
            (relation_logp(g, scores)?, l)
        }
    };
    let aligned = support.agam.filter(|r| r.ag.is_some() && r.sg.is_some());
    let terms = episode_alignment_losses(g, aligned.as_ref(), alignment, s)?;
    let loss = total_loss(g, l_mbc, &terms, alignment)?;
    Ok(EpisodeGraph {
        support,
        query,
        logp,
        l_mbc,
        l_cas: terms.l_cas,
        l_sas: terms.l_sas,
        loss,
        bn_stats,
    })
}

/// Attention difference of the support maps of an episode graph.
pub fn graph_attention_difference(g: &Graph, eg: &EpisodeGraph) -> Result<AttentionDifference> {
    let r = match eg.support.agam {
        Some(r) => r,
        None => return Ok(AttentionDifference::default()),
    };
    let (ag, sg) = match (r.ag, r.sg) {
        (Some(a), Some(s)) => (a, s),
        _ => return Ok(AttentionDifference::default()),
    };
    let pairs = |a: Option<Var>, s: Option<Var>| -> Result<Vec<_>> {
        match (a, s) {
            (Some(a), Some(s)) => split_pairs(g.value(a), g.value(s)),
            _ => Ok(Vec::new()),
        }
    };
    attention_difference(&pairs(ag.m_c, sg.m_c)?, &pairs(ag.m_s, sg.m_s)?)
}

/// Runs one episode, optionally with a backward pass.
pub fn run_episode(
    model: &Model,
    ep: &Episode,
    alignment: &AlignmentConfig,
    reduction: Reduction,
    mode: ForwardMode,
) -> Result<EpisodeResult> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let eg = build_episode_graph(&mut g, model, &bound, ep, alignment, reduction, mode)?;
    let logp = g.value(eg.logp).clone();
    let pred = argmax_rows(&logp);
    let correct = pred.iter().zip(&ep.query_labels).filter(|(p, y)| p == y).count();
    let stats = EpisodeStats {
        loss: g.value(eg.loss).item(),
        l_mbc: g.value(eg.l_mbc).item(),
        l_cas: g.value(eg.l_cas).item(),
        l_sas: g.value(eg.l_sas).item(),
        attn_diff: graph_attention_difference(&g, &eg)?,
        correct,
        n_query: ep.n_query(),
    };
    let grads = if mode.grads && stats.loss.is_finite() {
        g.backward(eg.loss)?;
        Some(bound.grads(&g))
    } else {
        None
    };
    Ok(EpisodeResult {
        stats,
        grads,
        bn_stats: eg.bn_stats,
        logp,
    })
}

/// Elementwise mean of per-episode gradients.
pub fn mean_grads(per_episode: &[Grads]) -> Result<Grads> {
    let first = per_episode
        .first()
        .ok_or_else(|| Error::contract("mean_grads of zero episodes"))?;
    let mut out = first.clone();
    for g in &per_episode[1..] {
        for (k, t) in g {
            let acc = out
                .get_mut(k)
                .ok_or_else(|| Error::contract(format!("gradient `{k}` missing from first episode")))?;
            acc.add_assign(t);
        }
    }
    let inv = 1.0 / per_episode.len() as f64;
    for t in out.values_mut() {
        t.scale(inv);
    }
    Ok(out)
}

/// `1.96 · s / √n` with `s` the sample standard deviation; 0 for `n ≤ 1`.
pub fn ci95(values: &[f64]) -> f64 {
    let n = values.len();
    if n <= 1 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    1.96 * math::sqrt(var) / math::sqrt(n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Percent.
    pub mean_accuracy: f64,
    /// Percent half-width.
    pub ci95: f64,
    pub n_episodes: usize,
    pub accuracies: Vec<f64>,
    /// Mean over episodes of the equal-weight family average.
    pub attn_diff: f64,
    pub attn_diff_channel: Option<f64>,
    pub attn_diff_spatial: Option<f64>,
}

/// Accuracy over `n_episodes` sampled episodes with batch-norm running
/// statistics.
pub fn evaluate<R: Rng + ?Sized>(
    model: &Model,
    dataset: &Dataset,
    spec: &EpisodeSpec,
    n_episodes: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let alignment = AlignmentConfig::default();
    let mut accuracies = Vec::with_capacity(n_episodes);
    let (mut diff, mut dc, mut ds) = (0.0, (0.0, 0usize), (0.0, 0usize));
    for _ in 0..n_episodes {
        let ep = sample_episode(dataset, spec, rng)?;
        let r = run_episode(model, &ep, &alignment, Reduction::Sum, ForwardMode::EVAL)?;
        accuracies.push(r.stats.accuracy());
        let a = r.stats.attn_diff;
        diff += a.mean();
        if let Some(c) = a.channel {
            dc = (dc.0 + c, dc.1 + 1);
        }
        if let Some(s) = a.spatial {
            ds = (ds.0 + s, ds.1 + 1);
        }
    }
    let n = n_episodes as f64;
    let avg = |(s, c): (f64, usize)| if c == 0 { None } else { Some(s / c as f64) };
    Ok(EvalReport {
        mean_accuracy: accuracies.iter().sum::<f64>() / n,
        ci95: ci95(&accuracies),
        n_episodes,
        accuracies,
        attn_diff: diff / n,
        attn_diff_channel: avg(dc),
        attn_diff_spatial: avg(ds),
    })
}

/// Per-batch training log entry (batch means).
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    /// Optimizer step, starting at 1.
    pub step: usize,
    pub l_mbc: f64,
    pub l_cas: f64,
    pub l_sas: f64,
    pub attn_diff: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestCheckpoint {
    pub val_acc: Option<f64>,
    pub episodes: usize,
    pub model: Model,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub episodes_done: usize,
    pub best: Option<BestCheckpoint>,
    pub log: Vec<LogRecord>,
}

impl TrainState {
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        let model = Model::new(&run.model, &run.ablation, &mut rng)?;
        Ok(TrainState {
            model,
            adam: AdamState::new(),
            rng,
            episodes_done: 0,
            best: None,
            log: Vec::new(),
        })
    }
}

pub struct TrainOutput {
    pub model: Model,
    pub best: BestCheckpoint,
    pub log: Vec<LogRecord>,
    pub adam: AdamState,
}

/// Mirrors an image left to right.
pub fn flip_horizontal(img: &mut [f64], w: usize) {
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

fn augment<R: Rng + ?Sized>(ep: &mut Episode, rng: &mut R) {
    for t in [&mut ep.support_images, &mut ep.query_images] {
        let w = *t.shape().last().expect("image batch");
        let per: usize = t.shape()[1..].iter().product();
        for img in t.data_mut().chunks_mut(per) {
            if rng.gen_bool(0.5) {
                flip_horizontal(img, w);
            }
        }
    }
}

/// Single-writer trainer over a dataset.
pub struct Trainer<'a> {
    pub run: RunConfig,
    pub dataset: &'a Dataset,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(run: &RunConfig, dataset: &'a Dataset) -> Result<Self> {
        let state = TrainState::new(run)?;
        Self::resume(run, dataset, state)
    }

    /// Continues from a saved state.
    pub fn resume(run: &RunConfig, dataset: &'a Dataset, state: TrainState) -> Result<Self> {
        run.validate()?;
        if dataset.attribute_dim != run.model.attribute_dim {
            return Err(Error::config(format!(
                "dataset has {} attributes, model expects {}",
                dataset.attribute_dim, run.model.attribute_dim
            )));
        }
        if dataset.image_shape != run.model.backbone.input_shape {
            return Err(Error::config(format!(
                "dataset images are {:?}, backbone expects {:?}",
                dataset.image_shape, run.model.backbone.input_shape
            )));
        }
        if dataset.splits.seen.is_empty() {
            return Err(Error::Capacity(String::from("the seen split is empty")));
        }
        Ok(Trainer {
            run: run.clone(),
            dataset,
            state,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.episodes_done >= self.run.total_episodes
    }

    /// Samples the next mini-batch of training episodes.
    pub fn next_batch(&mut self) -> Result<Vec<Episode>> {
        let n = self
            .run
            .episodes_per_batch
            .min(self.run.total_episodes - self.state.episodes_done);
        let spec = self.run.train_spec();
        (0..n)
            .map(|_| {
                let mut ep = sample_episode(self.dataset, &spec, &mut self.state.rng)?;
                if self.run.augment_flip {
                    augment(&mut ep, &mut self.state.rng);
                }
                Ok(ep)
            })
            .collect()
    }

    /// One optimizer step on the mean gradient of `episodes`.
    pub fn step_on(&mut self, episodes: &[Episode]) -> Result<LogRecord> {
        let step = self.state.adam.step as usize + 1;
        let mut grads = Vec::with_capacity(episodes.len());
        let mut stats = Vec::with_capacity(episodes.len());
        let mut bn = Vec::new();
        for ep in episodes {
            let r = run_episode(
                &self.state.model,
                ep,
                &self.run.alignment,
                self.run.loss_reduction,
                ForwardMode::TRAIN,
            )?;
            if !r.stats.loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    snapshot: Box::new(self.state.model.clone()),
                });
            }
            grads.push(r.grads.expect("training mode computes gradients"));
            stats.push(r.stats);
            bn.push(r.bn_stats);
        }
        let mean = mean_grads(&grads)?;
        adam_step(&mut self.state.model.params, &mean, &mut self.state.adam, &self.run.optimizer)?;
        for s in &bn {
            self.state.model.update_running_stats(s)?;
        }
        let n = stats.len() as f64;
        let avg = |f: fn(&EpisodeStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
        Ok(LogRecord {
            step,
            l_mbc: avg(|s| s.l_mbc),
            l_cas: avg(|s| s.l_cas),
            l_sas: avg(|s| s.l_sas),
            attn_diff: avg(|s| s.attn_diff.mean()),
            val_acc: None,
        })
    }

    /// Samples a batch, steps, and validates at validation boundaries.
    pub fn step(&mut self) -> Result<&LogRecord> {
        let batch = self.next_batch()?;
        let mut rec = self.step_on(&batch)?;
        let before = self.state.episodes_done;
        self.state.episodes_done += batch.len();
        let ve = self.run.validation_every;
        if before / ve != self.state.episodes_done / ve || self.finished() {
            rec.val_acc = self.validate()?;
        }
        self.state.log.push(rec);
        Ok(self.state.log.last().expect("just pushed"))
    }

    /// Rounds the state to what a checkpoint stores, then scores the model on
    /// the validation split and keeps it if it is the best so far.
    fn validate(&mut self) -> Result<Option<f64>> {
        self.state.model.round_to_f32();
        self.state.adam.round_to_f32();
        let spec = self.run.episode.with_split(Split::Validation);
        let usable = self.run.validation_episodes > 0
            && self.dataset.splits.validation.len() >= spec.n_way;
        let acc = if usable {
            let mut rng = ChaCha8Rng::seed_from_u64(self.run.seed ^ VALIDATION_SALT);
            let r = evaluate(
                &self.state.model,
                self.dataset,
                &spec,
                self.run.validation_episodes,
                &mut rng,
            )?;
            Some(r.mean_accuracy)
        } else {
            None
        };
        let better = match (&self.state.best, acc) {
            (None, _) => true,
            (Some(b), Some(a)) => b.val_acc.map_or(true, |prev| a > prev),
            (Some(_), None) => true,
        };
        if better {
            self.state.best = Some(BestCheckpoint {
                val_acc: acc,
                episodes: self.state.episodes_done,
                model: self.state.model.clone(),
            });
        }
        Ok(acc)
    }

    /// Trains until `episodes` episodes have been consumed (or the run ends).
    pub fn run_until(&mut self, episodes: usize) -> Result<()> {
        while !self.finished() && self.state.episodes_done < episodes {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<TrainOutput> {
        self.run_until(usize::MAX)?;
        let best = self.state.best.clone().expect("a finished run has validated");
        Ok(TrainOutput {
            model: self.state.model,
            best,
            log: self.state.log,
            adam: self.state.adam,
        })
    }
}

/// Trains a fresh model for the configured number of episodes.
pub fn train(run: &RunConfig, dataset: &Dataset) -> Result<TrainOutput> {
    Trainer::new(run, dataset)?.finish()
}

#[cfg(test)]
mod tests;
