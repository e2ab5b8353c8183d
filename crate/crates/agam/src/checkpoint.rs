//! Checkpoint directories: a `manifest.json` plus one tensor file per
//! parameter, batch-norm running statistic and Adam moment.
//!
//! Layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/params/<name>.agt
//! <dir>/buffers/<name>.agt
//! <dir>/adam_m/<name>.agt
//! <dir>/adam_v/<name>.agt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use agam_core::engine::{RunConfig, TrainState};
use agam_core::model::Model;
use agam_core::optim::AdamState;
use agam_core::params::ParamStore;
use agam_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_file::{read_tensor, write_tensor};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
const FORMAT: &str = "agam-checkpoint-1";

const GROUPS: [&str; 4] = ["params", "buffers", "adam_m", "adam_v"];

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// 32 seed bytes as hex.
    pub seed: String,
    pub stream: u64,
    /// Decimal; a `u128` does not fit a JSON number.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> std::result::Result<ChaCha8Rng, String> {
        if self.seed.len() != 64 {
            return Err(format!("rng seed must be 64 hex digits, got {}", self.seed.len()));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|e| format!("rng seed: {e}"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|e| format!("rng word_pos: {e}"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    /// Optimizer steps taken.
    pub step: u64,
    pub episodes_done: usize,
    pub config: RunConfig,
    pub rng: RngState,
    /// Dataset manifest the run trained on.
    #[serde(default)]
    pub dataset: Option<String>,
    /// `group/name` → shape of every stored tensor.
    pub tensors: BTreeMap<String, Vec<usize>>,
}

/// Everything needed to evaluate a model or continue its training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub model: Model,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub episodes_done: usize,
    pub dataset: Option<String>,
}

impl Checkpoint {
    pub fn from_state(run: &RunConfig, state: &TrainState) -> Self {
        Checkpoint {
            run: run.clone(),
            model: state.model.clone(),
            adam: state.adam.clone(),
            rng: state.rng.clone(),
            episodes_done: state.episodes_done,
            dataset: None,
        }
    }

    /// A trainer state that continues this run. The best-so-far record and
    /// the in-memory log start empty.
    pub fn into_state(self) -> TrainState {
        TrainState {
            model: self.model,
            adam: self.adam,
            rng: self.rng,
            episodes_done: self.episodes_done,
            best: None,
            log: Vec::new(),
        }
    }

    fn groups(&self) -> [(&'static str, Vec<(&String, &Tensor)>); 4] {
        [
            (GROUPS[0], self.model.params.iter().collect()),
            (GROUPS[1], self.model.buffers.iter().collect()),
            (GROUPS[2], self.adam.m.iter().collect()),
            (GROUPS[3], self.adam.v.iter().collect()),
        ]
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let mut tensors = BTreeMap::new();
        for (group, items) in self.groups() {
            for (name, t) in items {
                tensors.insert(format!("{group}/{name}"), t.shape().to_vec());
            }
        }
        CheckpointManifest {
            format: FORMAT.into(),
            step: self.adam.step,
            episodes_done: self.episodes_done,
            config: self.run.clone(),
            rng: RngState::capture(&self.rng),
            dataset: self.dataset.clone(),
            tensors,
        }
    }
}

fn tensor_path(dir: &Path, group: &str, name: &str) -> PathBuf {
    dir.join(group).join(format!("{name}.agt"))
}

/// Writes `ckpt` into `dir`, replacing any tensors stored there before.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for group in GROUPS {
        let sub = dir.join(group);
        if sub.exists() {
            fs::remove_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
    }
    for (group, items) in ckpt.groups() {
        for (name, t) in items {
            write_tensor(&tensor_path(dir, group, name), t)?;
        }
    }
    let path = dir.join(CHECKPOINT_MANIFEST);
    let mut text = serde_json::to_string_pretty(&ckpt.manifest())
        .map_err(|e| Error::Checkpoint(format!("cannot serialize manifest: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if m.format != FORMAT {
        return Err(Error::Manifest {
            path,
            msg: format!("unsupported checkpoint format `{}`", m.format),
        });
    }
    Ok(m)
}

/// Loads a checkpoint using the configuration stored in it.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m = read_manifest(dir)?;
    let run = m.config.clone();
    load_with_manifest(dir, m, &run)
}

/// Loads a checkpoint into the architecture described by `run`; any missing
/// tensor or shape disagreement is an error naming the parameter.
pub fn load_checkpoint_as(dir: &Path, run: &RunConfig) -> Result<Checkpoint> {
    let m = read_manifest(dir)?;
    load_with_manifest(dir, m, run)
}

fn load_with_manifest(dir: &Path, m: CheckpointManifest, run: &RunConfig) -> Result<Checkpoint> {
    // Initial values are discarded; only names and shapes are used.
    let mut model = Model::new(&run.model, &run.ablation, &mut ChaCha8Rng::seed_from_u64(0))?;
    let load_store = |group: &str, layout: &ParamStore| -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, expected) in layout.iter() {
            let key = format!("{group}/{name}");
            let recorded = m
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no tensor for `{name}` ({group})")))?;
            if recorded.as_slice() != expected.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` ({group}) has shape {recorded:?} in the checkpoint, the model expects {:?}",
                    expected.shape()
                )));
            }
            let t = read_tensor(&tensor_path(dir, group, name))?;
            if t.shape() != expected.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` ({group}): tensor file has shape {:?}, the model expects {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            out.insert(name.clone(), t);
        }
        let extra = m.tensors.keys().find(|k| {
            k.strip_prefix(group)
                .and_then(|r| r.strip_prefix('/'))
                .is_some_and(|n| !layout.contains(n))
        });
        if let Some(k) = extra {
            return Err(Error::Checkpoint(format!("checkpoint tensor `{k}` is not part of the model")));
        }
        Ok(out)
    };
    let params = load_store(GROUPS[0], &model.params)?;
    let buffers = load_store(GROUPS[1], &model.buffers)?;
    let mut adam = AdamState::new();
    adam.step = m.step;
    if m.step > 0 {
        adam.m = load_store(GROUPS[2], &params)?.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
        adam.v = load_store(GROUPS[3], &params)?.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
    }
    model.check_compatible(&params, &buffers)?;
    model.params = params;
    model.buffers = buffers;
    let rng = m
        .rng
        .restore()
        .map_err(|msg| Error::Manifest { path: dir.join(CHECKPOINT_MANIFEST), msg })?;
    Ok(Checkpoint {
        run: run.clone(),
        model,
        adam,
        rng,
        episodes_done: m.episodes_done,
        dataset: m.dataset,
    })
}
