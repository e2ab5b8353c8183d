mod common;

use std::fs;

use agam::checkpoint::{load_checkpoint, load_checkpoint_as, read_manifest, save_checkpoint, Checkpoint, RngState};
use agam::synth::synthesize;
use agam::Error;
use agam_core::engine::{evaluate, Trainer};
use agam_core::episode::{Dataset, EpisodeSpec, Split};
use agam_core::model::{AblationFlags, BackboneConfig, Model};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{small_run, small_spec};

fn dataset() -> Dataset {
    synthesize(&small_spec(), 1).unwrap().dataset().unwrap()
}

fn trained(ds: &Dataset, episodes: usize) -> Checkpoint {
    let run = small_run(12);
    let mut t = Trainer::new(&run, ds).unwrap();
    t.run_until(episodes).unwrap();
    Checkpoint::from_state(&t.run, &t.state)
}

fn assert_same(a: &Checkpoint, b: &Checkpoint) {
    assert_eq!(a.run, b.run);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.model.buffers, b.model.buffers);
    assert_eq!(a.adam, b.adam);
    assert_eq!(a.episodes_done, b.episodes_done);
    assert_eq!(a.dataset, b.dataset);
    let (mut ra, mut rb) = (a.rng.clone(), b.rng.clone());
    for _ in 0..8 {
        assert_eq!(ra.next_u64(), rb.next_u64());
    }
}

#[test]
fn round_trip_is_bit_exact() {
    let ds = dataset();
    // Eight episodes end on a validation boundary, where the state is f32.
    let ck = Checkpoint {
        dataset: Some("somewhere/manifest.json".into()),
        ..trained(&ds, 8)
    };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ck, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_same(&ck, &back);
    let m = read_manifest(dir.path()).unwrap();
    assert_eq!(m.episodes_done, 8);
    assert_eq!(m.step, 4);
    let stored = ck.model.params.len() + ck.model.buffers.len() + ck.adam.m.len() + ck.adam.v.len();
    assert_eq!(m.tensors.len(), stored);
}

#[test]
fn rng_state_round_trips_mid_stream() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..13 {
        r.next_u32();
    }
    let mut back = RngState::capture(&r).restore().unwrap();
    for _ in 0..20 {
        assert_eq!(r.next_u64(), back.next_u64());
    }
}

#[test]
fn saving_again_replaces_stale_tensors() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&trained(&ds, 4), dir.path()).unwrap();
    let later = trained(&ds, 8);
    save_checkpoint(&later, dir.path()).unwrap();
    assert_same(&later, &load_checkpoint(dir.path()).unwrap());
}

#[test]
fn mismatched_config_names_the_parameter() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&trained(&ds, 4), dir.path()).unwrap();
    let mut other = small_run(12);
    other.model.backbone = BackboneConfig::conv4(6, [3, 8, 8], [true, true, false, false]);
    let e = load_checkpoint_as(dir.path(), &other).unwrap_err();
    assert!(matches!(e, Error::Checkpoint(_)), "{e}");
    let msg = e.to_string();
    // The first parameter, in name order, whose shape differs.
    let rng = &mut ChaCha8Rng::seed_from_u64(0);
    let saved = Model::new(&small_run(12).model, &AblationFlags::default(), rng).unwrap();
    let wanted = Model::new(&other.model, &other.ablation, rng).unwrap();
    let (name, t) = wanted
        .params
        .iter()
        .find(|(n, t)| saved.params.get(n).unwrap().shape() != t.shape())
        .unwrap();
    assert!(msg.contains(&format!("`{name}`")), "{msg}");
    assert!(msg.contains(&format!("{:?}", t.shape())), "{msg}");
    assert!(msg.contains(&format!("{:?}", saved.params.get(name).unwrap().shape())), "{msg}");
}

#[test]
fn missing_or_extra_tensors_are_errors() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&trained(&ds, 4), dir.path()).unwrap();
    let mut plain = small_run(12);
    plain.ablation = AblationFlags::plain();
    let e = load_checkpoint_as(dir.path(), &plain).unwrap_err();
    assert!(e.to_string().contains("agam."), "{e}");

    fs::remove_file(dir.path().join("params/backbone.1.conv0.b.agt")).unwrap();
    let e = load_checkpoint(dir.path()).unwrap_err();
    assert!(matches!(e, Error::MissingFile(_)), "{e}");
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = load_checkpoint(&dir.path().join("absent")).unwrap_err();
    assert!(matches!(e, Error::MissingFile(_)), "{e}");
}

#[test]
fn resume_matches_an_unbroken_run() {
    let ds = dataset();
    let run = small_run(12);
    let mut whole = Trainer::new(&run, &ds).unwrap();
    whole.run_until(12).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(&run, &ds).unwrap();
    first.run_until(4).unwrap();
    save_checkpoint(&Checkpoint::from_state(&first.run, &first.state), dir.path()).unwrap();
    drop(first);

    let ck = load_checkpoint(dir.path()).unwrap();
    let mut second = Trainer::resume(&ck.run.clone(), &ds, ck.into_state()).unwrap();
    second.run_until(12).unwrap();
    assert_eq!(second.state.episodes_done, 12);
    assert_eq!(second.state.model.params, whole.state.model.params);
    assert_eq!(second.state.model.buffers, whole.state.model.buffers);
    assert_eq!(second.state.adam, whole.state.adam);
    assert_eq!(second.state.log[..], whole.state.log[2..]);
}

#[test]
fn evaluation_after_reload_is_identical() {
    let ds = dataset();
    let ck = trained(&ds, 12);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ck, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    let spec = EpisodeSpec::new(3, 1, 2, Split::Unseen);
    let a = evaluate(&ck.model, &ds, &spec, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = evaluate(&back.model, &ds, &spec, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}
