#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agam::synth::SynthSpec;
use agam_core::engine::RunConfig;
use agam_core::episode::{EpisodeSpec, Split};
use agam_core::model::{BackboneConfig, ModelConfig};

/// A small synthetic dataset: 15 classes split 9/3/3, 3×8×8 images, D=4.
pub fn small_spec() -> SynthSpec {
    SynthSpec {
        n_classes: 15,
        samples_per_class: 4,
        attribute_dim: 4,
        image_shape: [3, 8, 8],
        noise_sd: 0.3,
        distractor_count: 1,
    }
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::conv4(4, [3, 8, 8], [true, true, false, false]),
        attribute_dim: 4,
        reduction: 2,
        spatial_kernel: 3,
        ..ModelConfig::default()
    }
}

/// 3-way 1-shot, two episodes per batch, validation every four episodes.
pub fn small_run(total: usize) -> RunConfig {
    RunConfig {
        model: small_model(),
        episode: EpisodeSpec::new(3, 1, 2, Split::Seen),
        episodes_per_batch: 2,
        total_episodes: total,
        validation_every: 4,
        validation_episodes: 3,
        eval_episodes: 5,
        ..RunConfig::default()
    }
}

pub fn agam_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_agam"))
}

pub fn run_cli(args: &[&str]) -> Output {
    Command::new(agam_bin()).args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Writes a JSON training config for the small dataset and model.
pub fn write_small_config(dir: &Path, dataset: &Path, output: &Path, total: usize) -> PathBuf {
    let cfg = agam::config::CliConfig {
        dataset: Some(dataset.to_path_buf()),
        output: output.to_path_buf(),
        run: small_run(total),
    };
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).expect("config written");
    path
}

/// Every file under `dir` (relative path, bytes), sorted.
pub fn snapshot_dir(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).expect("readable dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_path_buf();
                out.push((rel, std::fs::read(&p).expect("readable file")));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
