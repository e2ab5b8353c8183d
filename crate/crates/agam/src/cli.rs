//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use agam_core::engine::{evaluate, EvalReport, Trainer};
use agam_core::episode::{EpisodeSpec, Split};
use agam_core::model::EmbedMode;
use agam_core::Tensor;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::load_config;
use crate::dataset::load_dataset;
use crate::error::{Error, Result};
use crate::gradcheck_suite::{broken_fixture, format_table, run_suite, standard_cases, DEFAULT_SEEDS};
use crate::image::{read_ppm, write_csv_vector, write_pgm};
use crate::metrics::MetricLog;
use crate::synth::{generate_synthetic, SynthSpec};
use crate::tensor_file::{read_tensor, write_tensor};

#[derive(Debug, Parser)]
#[command(name = "agam", version, about = "Attributes-guided attention for few-shot recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic attribute-driven dataset.
    Synth(SynthArgs),
    /// Train a model episodically.
    Train(TrainArgs),
    /// Evaluate a checkpoint on sampled episodes.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the attention maps of one image.
    DumpAttention(DumpArgs),
    /// Convert a PPM image into a tensor file.
    ImportPpm(ImportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SynthSpec::default().n_classes)]
    pub classes: usize,
    #[arg(long, default_value_t = SynthSpec::default().attribute_dim)]
    pub dim: usize,
    #[arg(long, default_value_t = SynthSpec::default().samples_per_class)]
    pub samples: usize,
    #[arg(long, default_value_t = SynthSpec::default().noise_sd)]
    pub noise: f64,
    #[arg(long, default_value_t = SynthSpec::default().distractor_count)]
    pub distractors: usize,
    /// Image side length (images are 3×size×size).
    #[arg(long, default_value_t = SynthSpec::default().image_shape[1])]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON configuration; defaults are used for absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `alignment.alpha=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the configured evaluation episode count.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to the dataset recorded in the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "unseen", value_parser = parse_split)]
    pub split: Split,
    #[arg(long)]
    pub way: Option<usize>,
    #[arg(long)]
    pub shot: Option<usize>,
    #[arg(long)]
    pub query: Option<usize>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "seen" => Ok(Split::Seen),
        "validation" => Ok(Split::Validation),
        "unseen" => Ok(Split::Unseen),
        other => Err(format!("unknown split `{other}` (seen, validation or unseen)")),
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    pub seeds: u64,
    /// Adds a row whose backward is wrong on purpose.
    #[arg(long, hide = true)]
    pub with_broken_fixture: bool,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Tensor file (`.agt`) or PPM image.
    #[arg(long)]
    pub image: PathBuf,
    /// Tensor file or comma/whitespace separated values.
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    #[arg(long, default_value = "attention")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

/// Machine-readable evaluation summary.
pub fn eval_line(r: &EvalReport) -> String {
    format!(
        "acc={:.2} ci95={:.2} n={} attn_diff={:.4}",
        r.mean_accuracy, r.ci95, r.n_episodes, r.attn_diff
    )
}

fn read_image(path: &Path) -> Result<Tensor> {
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        read_ppm(path)
    } else {
        read_tensor(path)
    }
}

fn read_attributes(path: &Path) -> Result<Tensor> {
    if path.extension().and_then(|e| e.to_str()) == Some("agt") {
        let t = read_tensor(path)?;
        return Ok(t.reshape(&[t.len()])?);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| Error::format(path, format!("attribute `{s}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_vec(values))
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let w = |out: &mut dyn Write, s: String| {
        // A closed stdout is not an error worth failing the command for.
        let _ = writeln!(out, "{s}");
    };
    match cli.command {
        Command::Synth(a) => {
            let spec = SynthSpec {
                n_classes: a.classes,
                samples_per_class: a.samples,
                attribute_dim: a.dim,
                image_shape: [3, a.size, a.size],
                noise_sd: a.noise,
                distractor_count: a.distractors,
            };
            spec.validate()?;
            let s = generate_synthetic(&spec, a.seed, &a.out)?;
            let (seen, val, unseen) = spec.split_sizes();
            w(
                out,
                format!(
                    "wrote {} classes ({seen} seen, {val} validation, {unseen} unseen) to {}",
                    s.manifest.classes.len(),
                    a.out.display()
                ),
            );
        }
        Command::Train(a) => {
            let cfg = load_config(a.config.as_deref(), &a.set)?;
            let manifest = cfg
                .dataset
                .clone()
                .ok_or_else(|| Error::Config("no dataset given (set `dataset` in the config or --set dataset=PATH)".into()))?;
            let ds = load_dataset(&manifest)?;
            let mut trainer = match &a.resume {
                None => Trainer::new(&cfg.run, &ds)?,
                Some(dir) => {
                    let ck = load_checkpoint(dir)?;
                    Trainer::resume(&cfg.run, &ds, ck.into_state())?
                }
            };
            std::fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
            std::fs::write(cfg.output.join("config.json"), cfg.to_json())
                .map_err(|e| Error::io(cfg.output.join("config.json"), e))?;
            let mut log = MetricLog::open(&cfg.output.join("metrics.csv"))?;
            let dataset_name = Some(manifest.display().to_string());
            let snapshot = |t: &Trainer| Checkpoint {
                dataset: dataset_name.clone(),
                ..Checkpoint::from_state(&t.run, &t.state)
            };
            while !trainer.finished() {
                let rec = trainer.step()?.clone();
                log.append(&rec)?;
                if let Some(acc) = rec.val_acc {
                    if !a.quiet {
                        w(out, format!("episode {} val_acc={acc:.2}", trainer.state.episodes_done));
                    }
                }
                let is_best = trainer
                    .state
                    .best
                    .as_ref()
                    .is_some_and(|b| b.episodes == trainer.state.episodes_done);
                if is_best {
                    save_checkpoint(&snapshot(&trainer), &cfg.output.join("best"))?;
                }
            }
            save_checkpoint(&snapshot(&trainer), &cfg.output.join("final"))?;
            w(
                out,
                format!(
                    "trained {} episodes; checkpoints in {}",
                    trainer.state.episodes_done,
                    cfg.output.display()
                ),
            );
        }
        Command::Eval(a) => {
            let ck = load_checkpoint(&a.checkpoint)?;
            let manifest = a
                .dataset
                .clone()
                .or_else(|| ck.dataset.as_ref().map(PathBuf::from))
                .ok_or_else(|| Error::Config("the checkpoint records no dataset; pass --dataset".into()))?;
            let ds = load_dataset(&manifest)?;
            let base = &ck.run.episode;
            let spec = EpisodeSpec::new(
                a.way.unwrap_or(base.n_way),
                a.shot.unwrap_or(base.k_shot),
                a.query.unwrap_or(base.q_per_class),
                a.split,
            );
            let n = a.episodes.unwrap_or(ck.run.eval_episodes);
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let r = evaluate(&ck.model, &ds, &spec, n, &mut rng)?;
            w(
                out,
                format!(
                    "{}-way {}-shot on {} classes: accuracy {:.2}% ± {:.2} over {} episodes",
                    spec.n_way,
                    spec.k_shot,
                    spec.split.name(),
                    r.mean_accuracy,
                    r.ci95,
                    r.n_episodes
                ),
            );
            w(out, eval_line(&r));
        }
        Command::Gradcheck(a) => {
            let mut cases = standard_cases();
            if a.with_broken_fixture {
                cases.push(broken_fixture());
            }
            let rows = run_suite(&cases, a.seed, a.seeds.max(1));
            w(out, format_table(&rows).trim_end().to_string());
            let failed = rows.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(Error::GradCheck(failed));
            }
        }
        Command::DumpAttention(a) => {
            let ck = load_checkpoint(&a.checkpoint)?;
            let image = read_image(&a.image)?;
            let attrs = a.attributes.as_deref().map(read_attributes).transpose()?;
            let mode = if attrs.is_some() { EmbedMode::SupportTrain } else { EmbedMode::Query };
            let emb = ck.model.embed(&image, attrs.as_ref(), mode)?;
            for set in &emb.maps {
                let tag = set.branch.tag();
                if let Some(m) = &set.m_c {
                    let p = a.out.join(format!("{tag}_m_c.csv"));
                    write_csv_vector(&p, m.data())?;
                    w(out, format!("wrote {}", p.display()));
                }
                if let Some(m) = &set.m_s {
                    let p = a.out.join(format!("{tag}_m_s.pgm"));
                    write_pgm(&p, m)?;
                    w(out, format!("wrote {}", p.display()));
                }
            }
        }
        Command::ImportPpm(a) => {
            let t = read_ppm(&a.input)?;
            write_tensor(&a.output, &t)?;
            w(out, format!("wrote {:?} tensor to {}", t.shape(), a.output.display()));
        }
    }
    Ok(())
}
