mod common;

use std::fs;
use std::path::{Path, PathBuf};

use agam::checkpoint::load_checkpoint;
use agam::cli::eval_line;
use agam::dataset::{load_dataset, MANIFEST_FILE};
use agam::image::{decode_pgm, to_gray};
use agam::metrics::{parse_log, HEADER};
use agam::tensor_file::{read_tensor, write_tensor};
use agam_core::engine::evaluate;
use agam_core::episode::{EpisodeSpec, Split};
use agam_core::model::EmbedMode;
use agam_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{path_str, run_cli, snapshot_dir, stderr, stdout, write_small_config};

fn synth_small(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let o = run_cli(&[
        "synth", "--out", path_str(&out), "--classes", "15", "--dim", "4", "--samples", "4", "--size", "8",
        "--noise", "0.3", "--distractors", "1", "--seed", "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join(MANIFEST_FILE)
}

/// Trains the small configuration for eight episodes into `dir/run`.
fn train_small(dir: &Path, manifest: &Path, extra: &[&str]) -> PathBuf {
    let output = dir.join("run");
    let cfg = write_small_config(dir, manifest, &output, 8);
    let mut args = vec!["train", "--config", path_str(&cfg), "--quiet"];
    for e in extra {
        args.extend(["--set", e]);
    }
    let o = run_cli(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    output
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run_cli(&["--help"]).status.code(), Some(0));
    assert_eq!(run_cli(&["--version"]).status.code(), Some(0));
    assert_eq!(run_cli(&["bogus-command"]).status.code(), Some(1));
    assert_eq!(run_cli(&[]).status.code(), Some(1));
}

#[test]
fn synth_defaults_write_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = run_cli(&["synth", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("40 classes (24 seen, 8 validation, 8 unseen)"), "{}", stdout(&o));
    let ds = load_dataset(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(ds.attribute_dim, 16);
    assert_eq!(ds.image_shape, [3, 32, 32]);
    assert_eq!(ds.classes.len(), 40);
}

#[test]
fn synth_with_too_few_classes_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_cli(&["synth", "--out", path_str(&dir.path().join("d")), "--classes", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("need ≥ 6 classes"), "{}", stderr(&o));
}

#[test]
fn synth_twice_gives_identical_directories() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run_cli(&["synth", "--out", path_str(out), "--classes", "8", "--samples", "3", "--seed", "4"]);
        assert!(o.status.success());
    }
    assert!(snapshot_dir(&a) == snapshot_dir(&b));
}

#[test]
fn train_writes_config_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path());
    let run = train_small(dir.path(), &manifest, &["alignment.alpha=0", "alignment.beta=0"]);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["alignment"]["alpha"], 0.0);
    assert_eq!(cfg["alignment"]["beta"], 0.0);
    let log = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(log.starts_with(HEADER));
    let recs = parse_log(&log).unwrap();
    assert_eq!(recs.len(), 4);
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 2, 3, 4]);
    assert!(recs[1].val_acc.is_some() && recs[0].val_acc.is_none());
    let fin = load_checkpoint(&run.join("final")).unwrap();
    assert_eq!(fin.episodes_done, 8);
    assert_eq!(fin.run.alignment.alpha, 0.0);
    assert_eq!(fin.dataset.as_deref(), Some(manifest.to_str().unwrap()));
    assert!(load_checkpoint(&run.join("best")).is_ok());
}

#[test]
fn train_rejects_unknown_keys_listing_valid_ones() {
    let o = run_cli(&["train", "--set", "alignment.alfa=0"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("alignment.alfa") && err.contains("alignment.alpha"), "{err}");
}

#[test]
fn train_without_dataset_is_a_config_error() {
    let o = run_cli(&["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dataset"));
}

#[test]
fn same_config_and_seed_give_identical_checkpoint_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let ra = train_small(&a, &manifest, &[]);
    let rb = train_small(&b, &manifest, &[]);
    let (sa, sb) = (snapshot_dir(&ra.join("final")), snapshot_dir(&rb.join("final")));
    assert!(!sa.is_empty());
    assert!(sa == sb, "checkpoints differ");
    assert_eq!(fs::read(ra.join("metrics.csv")).unwrap(), fs::read(rb.join("metrics.csv")).unwrap());
}

#[test]
fn train_resume_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path());
    let whole = train_small(dir.path(), &manifest, &[]);

    let part_dir = dir.path().join("part");
    fs::create_dir_all(&part_dir).unwrap();
    let part = train_small(&part_dir, &manifest, &["total_episodes=4"]);
    let cfg = write_small_config(&part_dir, &manifest, &part_dir.join("resumed"), 8);
    let o = run_cli(&[
        "train", "--config", path_str(&cfg), "--resume", path_str(&part.join("final")), "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = load_checkpoint(&whole.join("final")).unwrap();
    let b = load_checkpoint(&part_dir.join("resumed/final")).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.adam, b.adam);
}

fn parse_eval_line(out: &str) -> (f64, f64, usize, f64) {
    let line = out.lines().find(|l| l.starts_with("acc=")).expect("machine-readable line");
    let fields: Vec<&str> = line.split(' ').collect();
    assert_eq!(fields.len(), 4, "{line}");
    let v = |i: usize, key: &str| fields[i].strip_prefix(key).unwrap_or_else(|| panic!("{line}")).to_string();
    let (acc, ci, n, attn) = (v(0, "acc="), v(1, "ci95="), v(2, "n="), v(3, "attn_diff="));
    assert_eq!(acc.split('.').nth(1).map(str::len), Some(2), "{line}");
    assert_eq!(ci.split('.').nth(1).map(str::len), Some(2), "{line}");
    assert_eq!(attn.split('.').nth(1).map(str::len), Some(4), "{line}");
    (acc.parse().unwrap(), ci.parse().unwrap(), n.parse().unwrap(), attn.parse().unwrap())
}

#[test]
fn eval_prints_the_library_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path());
    let run = train_small(dir.path(), &manifest, &[]);
    let ck_dir = run.join("final");
    let o = run_cli(&["eval", "--checkpoint", path_str(&ck_dir), "--episodes", "7", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let (_, _, n, _) = parse_eval_line(&out);
    assert_eq!(n, 7);

    let ck = load_checkpoint(&ck_dir).unwrap();
    let ds = load_dataset(&manifest).unwrap();
    let spec = EpisodeSpec::new(3, 1, 2, Split::Unseen);
    let r = evaluate(&ck.model, &ds, &spec, 7, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(out.lines().any(|l| l == eval_line(&r)), "{out}");
    assert!(out.contains("3-way 1-shot on unseen classes"), "{out}");
}

#[test]
fn eval_line_format() {
    let r = agam_core::engine::EvalReport {
        mean_accuracy: 61.234,
        ci95: 1.5,
        n_episodes: 600,
        accuracies: vec![],
        attn_diff: 0.01234567,
        attn_diff_channel: None,
        attn_diff_spatial: None,
    };
    assert_eq!(eval_line(&r), "acc=61.23 ci95=1.50 n=600 attn_diff=0.0123");
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_cli(&["eval", "--checkpoint", path_str(&dir.path().join("nothing"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing file"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_on_a_healthy_build() {
    let o = run_cli(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert!(rows.len() > 20);
    assert!(rows.iter().all(|l| l.ends_with("PASS")), "{out}");
}

#[test]
fn gradcheck_flags_a_broken_backward() {
    let o = run_cli(&["gradcheck", "--seeds", "3", "--with-broken-fixture"]);
    assert_eq!(o.status.code(), Some(2));
    let out = stdout(&o);
    let broken = out.lines().find(|l| l.starts_with("broken square")).expect("fixture row");
    assert!(broken.ends_with("FAIL"), "{broken}");
    assert_eq!(broken.split_whitespace().rev().nth(2), Some("5.0e-1"));
    assert_eq!(out.lines().filter(|l| l.ends_with("FAIL")).count(), 1, "{out}");
}

#[test]
fn dump_attention_writes_both_branches() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path());
    let run = train_small(dir.path(), &manifest, &[]);
    let ck = load_checkpoint(&run.join("final")).unwrap();
    let ds = load_dataset(&manifest).unwrap();
    let sample = &ds.classes[0].samples[0];
    let img_path = dir.path().join("img.agt");
    write_tensor(&img_path, &sample.image).unwrap();
    let attr_path = dir.path().join("attrs.txt");
    let text: Vec<String> = sample.attributes.data().iter().map(|v| v.to_string()).collect();
    fs::write(&attr_path, text.join(", ")).unwrap();
    let out = dir.path().join("maps");

    let o = run_cli(&[
        "dump-attention", "--checkpoint", path_str(&run.join("final")), "--image", path_str(&img_path),
        "--attributes", path_str(&attr_path), "--out", path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let emb = ck.model.embed(&sample.image, Some(&sample.attributes), EmbedMode::SupportTrain).unwrap();
    assert_eq!(emb.maps.len(), 2);
    for set in &emb.maps {
        let tag = set.branch.tag();
        let m_c = set.m_c.as_ref().unwrap();
        let csv = fs::read_to_string(out.join(format!("{tag}_m_c.csv"))).unwrap();
        let values: Vec<f64> = csv.lines().skip(1).map(|l| l.split_once(',').unwrap().1.parse().unwrap()).collect();
        assert_eq!(values, m_c.data());

        let m_s = set.m_s.as_ref().unwrap();
        let bytes = fs::read(out.join(format!("{tag}_m_s.pgm"))).unwrap();
        let [.., h, w] = m_s.shape() else { panic!() };
        let header = format!("P5 {w} {h} 255\n");
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + w * h);
        let (_, _, px) = decode_pgm(&bytes, Path::new("m")).unwrap();
        assert_eq!(px, to_gray(m_s.data()));
        // Within 8-bit quantization of the min-max scaled map.
        let (lo, hi) = m_s.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for (&p, &v) in px.iter().zip(m_s.data()) {
            if hi > lo {
                assert!((lo + p as f64 / 255.0 * (hi - lo) - v).abs() <= 0.5 / 255.0 * (hi - lo) + 1e-12);
            }
        }
    }
}

#[test]
fn dump_attention_without_attributes_writes_the_self_guided_branch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path());
    let run = train_small(dir.path(), &manifest, &[]);
    let ppm = dir.path().join("img.ppm");
    let mut bytes = b"P6 8 8 255\n".to_vec();
    bytes.extend((0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8));
    fs::write(&ppm, bytes).unwrap();
    let out = dir.path().join("maps");
    let o = run_cli(&[
        "dump-attention", "--checkpoint", path_str(&run.join("final")), "--image", path_str(&ppm), "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("sg_m_c.csv").exists() && out.join("sg_m_s.pgm").exists());
    assert!(!out.join("ag_m_c.csv").exists());
}

#[test]
fn import_ppm_writes_a_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let ppm = dir.path().join("a.ppm");
    fs::write(&ppm, b"P3 1 2 255\n255 0 0\n0 0 255\n").unwrap();
    let agt = dir.path().join("a.agt");
    let o = run_cli(&["import-ppm", "--input", path_str(&ppm), "--output", path_str(&agt)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = read_tensor(&agt).unwrap();
    assert_eq!(t, Tensor::new(vec![3, 2, 1], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
}
