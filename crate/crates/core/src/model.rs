//! Backbone, attention module and embedding head assembled into one model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agam::{
    agam_forward, AgamConfig, AgamResult, AttentionOrder, Branch, BranchParams, BranchVars,
};
use crate::autodiff::{BatchStats, Graph, PoolMode, Var};
use crate::heads::{HeadKind, RelationParams};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub out_channels: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default)]
    pub pool: bool,
    #[serde(default)]
    pub residual: bool,
}

fn three() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_shape: [usize; 3],
    pub blocks: Vec<BlockConfig>,
}

impl Default for BackboneConfig {
    /// Four 32-channel blocks, pooling in the first three, 3×32×32 input.
    fn default() -> Self {
        Self::conv4(32, [3, 32, 32], [true, true, true, false])
    }
}

impl BackboneConfig {
    pub fn conv4(channels: usize, input_shape: [usize; 3], pools: [bool; 4]) -> Self {
        BackboneConfig {
            input_shape,
            blocks: pools
                .iter()
                .map(|&pool| BlockConfig {
                    out_channels: channels,
                    kernel: 3,
                    pool,
                    residual: false,
                })
                .collect(),
        }
    }

    /// `C×H×W` of the final feature map; rejects configurations that pool a
    /// map below 1×1.
    pub fn output_shape(&self) -> Result<[usize; 3]> {
        let [mut c, mut h, mut w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("backbone: empty input shape"));
        }
        if self.blocks.is_empty() {
            return Err(Error::config("backbone: no blocks"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel % 2 == 0 || b.kernel == 0 {
                return Err(Error::config(format!("backbone block {i}: kernel must be odd")));
            }
            if b.out_channels == 0 {
                return Err(Error::config(format!("backbone block {i}: zero channels")));
            }
            c = b.out_channels;
            if b.pool {
                if h < 2 || w < 2 {
                    return Err(Error::config(format!(
                        "backbone block {i}: spatial extent underflow, cannot pool a {h}×{w} map"
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok([c, h, w])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingPool {
    #[default]
    Flatten,
    GlobalAvg,
}

/// Architecture hyperparameters independent of the ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attribute_dim: usize,
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub embedding: EmbeddingPool,
    pub head: HeadKind,
    pub relation_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            attribute_dim: 16,
            reduction: 8,
            spatial_kernel: 7,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            embedding: EmbeddingPool::Flatten,
            head: HeadKind::Protonet,
            relation_hidden: 8,
        }
    }
}

/// Architecture switches used by the ablation suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// When off, every sample takes the self-guided branch and no alignment
    /// is computed.
    pub use_attributes: bool,
    /// Replace every attribute vector by zeros.
    pub zero_attributes: bool,
    pub order: AttentionOrder,
    #[serde(rename = "disable_avgpool")]
    pub disable_avgpool: bool,
    #[serde(rename = "disable_maxpool")]
    pub disable_maxpool: bool,
    #[serde(rename = "disable_CA")]
    pub disable_ca: bool,
    #[serde(rename = "disable_SA")]
    pub disable_sa: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_attributes: true,
            zero_attributes: false,
            order: AttentionOrder::ChannelFirst,
            disable_avgpool: false,
            disable_maxpool: false,
            disable_ca: false,
            disable_sa: false,
        }
    }
}

impl AblationFlags {
    /// Backbone and head only: no attention module at all.
    pub fn plain() -> Self {
        AblationFlags {
            disable_ca: true,
            disable_sa: true,
            use_attributes: false,
            ..Self::default()
        }
    }
}

impl ModelConfig {
    pub fn agam_config(&self, flags: &AblationFlags) -> Result<AgamConfig> {
        let [c, _, _] = self.backbone.output_shape()?;
        Ok(AgamConfig {
            channels: c,
            attribute_dim: self.attribute_dim,
            reduction: self.reduction,
            spatial_kernel: self.spatial_kernel,
            order: flags.order,
            use_avgpool: !flags.disable_avgpool,
            use_maxpool: !flags.disable_maxpool,
            channel_attention: !flags.disable_ca,
            spatial_attention: !flags.disable_sa,
        })
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        let [c, h, w] = self.backbone.output_shape()?;
        Ok(match self.embedding {
            EmbeddingPool::Flatten => c * h * w,
            EmbeddingPool::GlobalAvg => c,
        })
    }
}

/// How a sample is embedded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    /// Attributes-guided embedding plus the self-guided maps for alignment.
    SupportTrain,
    /// Attributes-guided embedding only.
    SupportEval,
    /// Self-guided embedding; attributes are ignored.
    Query,
}

/// Materialized maps of one branch for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSet {
    pub branch: Branch,
    pub refined: Tensor,
    pub m_c: Option<Tensor>,
    pub m_s: Option<Tensor>,
}

/// A sample's flattened embedding with the maps that produced it. The first
/// entry of `maps` is the branch that carries the embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vec: Tensor,
    pub maps: Vec<MapSet>,
}

/// Graph-level result of embedding a batch.
#[derive(Clone, Debug)]
pub struct BatchEmbedding {
    /// `N×E` embeddings.
    pub vecs: Var,
    /// `N×C×H×W` maps the embeddings were flattened from.
    pub maps: Var,
    pub agam: Option<AgamResult>,
}

/// Parameters, batch-norm running statistics and architecture of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub flags: AblationFlags,
    pub agam: AgamConfig,
    pub params: ParamStore,
    /// Batch-norm running means and variances.
    pub buffers: ParamStore,
}

fn bn_names(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}.gamma"),
        format!("{prefix}.beta"),
        format!("{prefix}.running_mean"),
        format!("{prefix}.running_var"),
    ]
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, flags: &AblationFlags, rng: &mut R) -> Result<Self> {
        let agam = config.agam_config(flags)?;
        if agam.enabled() {
            agam.validate()?;
        }
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut c_in = config.backbone.input_shape[0];
        let add_bn = |params: &mut ParamStore, buffers: &mut ParamStore, prefix: &str, c: usize| {
            let [g, b, m, v] = bn_names(prefix);
            params.insert(g, Tensor::ones(&[c]));
            params.insert(b, Tensor::zeros(&[c]));
            buffers.insert(m, Tensor::zeros(&[c]));
            buffers.insert(v, Tensor::ones(&[c]));
        };
        for (i, b) in config.backbone.blocks.iter().enumerate() {
            let c = b.out_channels;
            let convs = if b.residual { 3 } else { 1 };
            let mut cur = c_in;
            for j in 0..convs {
                let fan = cur * b.kernel * b.kernel;
                params.insert(
                    format!("backbone.{i}.conv{j}.w"),
                    fan_in_uniform(&[c, cur, b.kernel, b.kernel], fan, rng),
                );
                params.insert(format!("backbone.{i}.conv{j}.b"), Tensor::zeros(&[c]));
                add_bn(&mut params, &mut buffers, &format!("backbone.{i}.bn{j}"), c);
                cur = c;
            }
            if b.residual && c_in != c {
                params.insert(
                    format!("backbone.{i}.short.w"),
                    fan_in_uniform(&[c, c_in, 1, 1], c_in, rng),
                );
                params.insert(format!("backbone.{i}.short.b"), Tensor::zeros(&[c]));
                add_bn(&mut params, &mut buffers, &format!("backbone.{i}.short_bn"), c);
            }
            c_in = c;
        }
        if agam.enabled() {
            // Self-guided first so that its initialization does not depend
            // on the attribute dimension.
            BranchParams::init(&agam, Branch::SelfGuided, rng).insert_into(&mut params);
            BranchParams::init(&agam, Branch::AttributesGuided, rng).insert_into(&mut params);
        }
        if config.head == HeadKind::Relation {
            let [c, h, w] = config.backbone.output_shape()?;
            RelationParams::init(c, h, w, config.relation_hidden, rng).insert_into(&mut params);
        }
        Ok(Model {
            config: config.clone(),
            flags: flags.clone(),
            agam,
            params,
            buffers,
        })
    }

    pub fn uses_attention(&self) -> bool {
        self.agam.enabled()
    }

    /// Whether support samples take the attributes-guided branch.
    pub fn uses_attributes(&self) -> bool {
        self.agam.enabled() && self.flags.use_attributes
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g)
    }

    fn bn(
        &self,
        g: &mut Graph,
        bound: &Bound,
        prefix: &str,
        x: Var,
        training: bool,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let [gn, bn, mn, vn] = bn_names(prefix);
        let (gamma, beta) = (bound.var(&gn)?, bound.var(&bn)?);
        if training {
            let (y, s) = g.batch_norm(x, gamma, beta, None, self.config.bn_eps)?;
            stats.push((String::from(prefix), s.expect("batch statistics")));
            Ok(y)
        } else {
            let (m, v) = (self.buffers.get(&mn)?, self.buffers.get(&vn)?);
            let (y, _) = g.batch_norm(x, gamma, beta, Some((m.data(), v.data())), self.config.bn_eps)?;
            Ok(y)
        }
    }

    /// Backbone over an `N×C×H×W` batch (or a single `C×H×W` image).
    ///
    /// In training mode batch norm uses the statistics of this batch and the
    /// statistics are returned for the running-average update; otherwise the
    /// running averages are used.
    pub fn backbone_forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        images: Var,
        training: bool,
    ) -> Result<(Var, Vec<(String, BatchStats)>)> {
        let s = g.shape(images);
        let img = if s.len() == 4 { &s[1..] } else { s };
        if img != self.config.backbone.input_shape {
            return Err(Error::shape(format!(
                "image shape {img:?} does not match backbone input {:?}",
                self.config.backbone.input_shape
            )));
        }
        let mut stats = Vec::new();
        let mut x = images;
        for (i, b) in self.config.backbone.blocks.iter().enumerate() {
            let pad = b.kernel / 2;
            let conv = |g: &mut Graph, x: Var, j: usize| -> Result<Var> {
                let w = bound.var(&format!("backbone.{i}.conv{j}.w"))?;
                let bias = bound.var(&format!("backbone.{i}.conv{j}.b"))?;
                g.conv2d(x, w, bias, pad)
            };
            if b.residual {
                let mut y = x;
                for j in 0..3 {
                    y = conv(g, y, j)?;
                    y = self.bn(g, bound, &format!("backbone.{i}.bn{j}"), y, training, &mut stats)?;
                    if j < 2 {
                        y = g.relu(y);
                    }
                }
                let short = if self.params.contains(&format!("backbone.{i}.short.w")) {
                    let w = bound.var(&format!("backbone.{i}.short.w"))?;
                    let bias = bound.var(&format!("backbone.{i}.short.b"))?;
                    let s = g.conv2d(x, w, bias, 0)?;
                    self.bn(g, bound, &format!("backbone.{i}.short_bn"), s, training, &mut stats)?
                } else {
                    x
                };
                let sum = g.add(y, short)?;
                x = g.relu(sum);
            } else {
                let y = conv(g, x, 0)?;
                let y = self.bn(g, bound, &format!("backbone.{i}.bn0"), y, training, &mut stats)?;
                x = g.relu(y);
            }
            if b.pool {
                x = g.max_pool2(x)?;
            }
        }
        Ok((x, stats))
    }

    fn branch_vars(&self, bound: &Bound) -> Result<(BranchVars, BranchVars)> {
        Ok((
            BranchVars::from_bound(bound, Branch::AttributesGuided)?,
            BranchVars::from_bound(bound, Branch::SelfGuided)?,
        ))
    }

    /// Attention refinement of a feature batch. `attrs` selects the
    /// attributes-guided branch; `dual` additionally runs the self-guided one.
    pub fn attend(
        &self,
        g: &mut Graph,
        bound: &Bound,
        feats: Var,
        attrs: Option<Var>,
        dual: bool,
    ) -> Result<Option<AgamResult>> {
        if !self.agam.enabled() {
            return Ok(None);
        }
        let (ag, sg) = self.branch_vars(bound)?;
        let attrs = if self.flags.use_attributes { attrs } else { None };
        let attrs = match (attrs, self.flags.zero_attributes) {
            (Some(a), true) => {
                let z = Tensor::zeros(g.shape(a));
                Some(g.constant(z))
            }
            (a, _) => a,
        };
        agam_forward(g, &ag, &sg, &self.agam, feats, attrs, dual).map(Some)
    }

    /// Flattens (or globally averages) `N×C×H×W` maps into `N×E` rows.
    pub fn flatten(&self, g: &mut Graph, maps: Var) -> Result<Var> {
        match self.config.embedding {
            EmbeddingPool::Flatten => g.flatten_rows(maps),
            EmbeddingPool::GlobalAvg => {
                let p = g.global_pool(maps, PoolMode::Avg)?;
                g.flatten_rows(p)
            }
        }
    }

    /// Embeds an `N×C×H×W` batch. With `attrs` (`N×D`) the batch takes the
    /// attributes-guided branch, otherwise the self-guided one.
    pub fn embed_batch(
        &self,
        g: &mut Graph,
        bound: &Bound,
        feats: Var,
        attrs: Option<Var>,
        dual: bool,
    ) -> Result<BatchEmbedding> {
        let agam = self.attend(g, bound, feats, attrs, dual)?;
        let maps = match &agam {
            Some(r) => r.primary().refined,
            None => feats,
        };
        let vecs = self.flatten(g, maps)?;
        Ok(BatchEmbedding { vecs, maps, agam })
    }

    /// Embeds one image using batch-norm running statistics.
    pub fn embed(&self, image: &Tensor, attributes: Option<&Tensor>, mode: EmbedMode) -> Result<Embedding> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let batch = image.reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]]);
        let x = g.constant(batch.map_err(|_| Error::shape("embed: image must be C×H×W"))?);
        let (feats, _) = self.backbone_forward(&mut g, &bound, x, false)?;
        let attrs = match mode {
            EmbedMode::Query => None,
            EmbedMode::SupportTrain | EmbedMode::SupportEval => {
                let a = attributes.ok_or_else(|| {
                    Error::contract("support embedding requires an attribute vector")
                })?;
                if a.rank() != 1 {
                    return Err(Error::shape("attribute vector must have rank 1"));
                }
                Some(g.constant(a.reshape(&[1, a.len()])?))
            }
        };
        let dual = mode == EmbedMode::SupportTrain;
        let emb = self.embed_batch(&mut g, &bound, feats, attrs, dual)?;
        let vec = g.value(emb.vecs).reshape(&[g.value(emb.vecs).len()])?;
        let mut maps = Vec::new();
        let unbatch = |g: &Graph, v: Var| -> Tensor {
            let t = g.value(v);
            t.reshape(&t.shape()[1..]).expect("unbatch")
        };
        match emb.agam {
            None => maps.push(MapSet {
                branch: Branch::SelfGuided,
                refined: unbatch(&g, emb.maps),
                m_c: None,
                m_s: None,
            }),
            Some(r) => {
                for out in [r.ag, r.sg].into_iter().flatten() {
                    maps.push(MapSet {
                        branch: out.branch,
                        refined: unbatch(&g, out.refined),
                        m_c: out.m_c.map(|v| unbatch(&g, v)),
                        m_s: out.m_s.map(|v| unbatch(&g, v)),
                    });
                }
            }
        }
        Ok(Embedding { vec, maps })
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        let mom = self.config.bn_momentum;
        for (prefix, s) in stats {
            let [_, _, mn, vn] = bn_names(prefix);
            for (name, batch) in [(mn, &s.mean), (vn, &s.var)] {
                let t = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::contract(format!("unknown buffer `{name}`")))?;
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - mom) * *r + mom * b;
                }
            }
        }
        Ok(())
    }

    /// Same architecture, names and shapes.
    pub fn check_compatible(&self, params: &ParamStore, buffers: &ParamStore) -> Result<()> {
        self.params.check_layout(params)?;
        self.buffers.check_layout(buffers)
    }

    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
        self.buffers.round_to_f32();
    }
}
