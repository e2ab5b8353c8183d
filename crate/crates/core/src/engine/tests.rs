use super::*;
use rand::Rng;
use crate::episode::{Class, Sample, Splits};
use crate::model::BackboneConfig;
use crate::testutil::{rand_tensor, rng};
use alloc::vec;
use proptest::prelude::*;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::conv4(4, [3, 8, 8], [true, true, false, false]),
        attribute_dim: 4,
        reduction: 2,
        spatial_kernel: 3,
        ..ModelConfig::default()
    }
}

/// Classes whose images are a class-specific pattern plus noise, unless
/// `informative` is off (pure noise).
fn dataset(n: usize, per: usize, informative: bool, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let classes = (0..n)
        .map(|c| {
            let base = rand_tensor(&[3, 8, 8], &mut r);
            let attrs = Tensor::from_fn(&[4], |j| ((c >> j) & 1) as f64);
            Class {
                id: c as u32,
                samples: (0..per)
                    .map(|_| {
                        let noise = rand_tensor(&[3, 8, 8], &mut r);
                        let image = if informative {
                            Tensor::from_fn(&[3, 8, 8], |i| 2.0 * base.data()[i] + 0.3 * noise.data()[i])
                        } else {
                            noise
                        };
                        Sample { image, attributes: attrs.clone() }
                    })
                    .collect(),
            }
        })
        .collect();
    let third = n / 3;
    Dataset {
        name: "engine".into(),
        attribute_dim: 4,
        image_shape: [3, 8, 8],
        classes,
        splits: Splits {
            seen: (0..n - 2 * third).collect(),
            validation: (n - 2 * third..n - third).collect(),
            unseen: (n - third..n).collect(),
        },
    }
}

fn tiny_run(total: usize) -> RunConfig {
    RunConfig {
        model: tiny_model(),
        episode: EpisodeSpec::new(3, 1, 2, Split::Seen),
        episodes_per_batch: 2,
        total_episodes: total,
        validation_every: 4,
        validation_episodes: 3,
        ..RunConfig::default()
    }
}

#[test]
fn ci95_examples() {
    assert_eq!(ci95(&[]), 0.0);
    assert_eq!(ci95(&[73.0]), 0.0);
    assert_eq!(ci95(&[50.0, 50.0, 50.0]), 0.0);
    // s = 50·√2, n = 2.
    assert!((ci95(&[0.0, 100.0]) - 98.0).abs() < 1e-12);
}

#[test]
fn ci95_matches_loop_oracle() {
    let mut r = rng(1);
    for n in 2..30 {
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..100.0)).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let mut ss = 0.0;
        for x in &v {
            ss += (x - mean) * (x - mean);
        }
        let oracle = 1.96 * libm::sqrt(ss / (n - 1) as f64) / libm::sqrt(n as f64);
        assert!((ci95(&v) - oracle).abs() < 1e-12);
    }
}

#[test]
fn mean_grads_is_elementwise_mean() {
    let g = |v: f64| -> Grads { [("a".into(), Tensor::full(&[2], v))].into_iter().collect() };
    let m = mean_grads(&[g(1.0), g(2.0), g(6.0)]).unwrap();
    assert_eq!(m["a"].data(), &[3.0, 3.0]);
    assert!(matches!(mean_grads(&[]), Err(Error::Contract(_))));
}

#[test]
fn batch_step_equals_mean_gradient_step() {
    let ds = dataset(9, 6, true, 2);
    let run = tiny_run(8);
    let mut t = Trainer::new(&run, &ds).unwrap();
    let batch = t.next_batch().unwrap();
    assert_eq!(batch.len(), 2);
    let mut model = t.state.model.clone();
    let grads: Vec<Grads> = batch
        .iter()
        .map(|ep| {
            run_episode(&model, ep, &run.alignment, run.loss_reduction, ForwardMode::TRAIN)
                .unwrap()
                .grads
                .unwrap()
        })
        .collect();
    let mut adam = AdamState::new();
    adam_step(&mut model.params, &mean_grads(&grads).unwrap(), &mut adam, &run.optimizer).unwrap();
    t.step_on(&batch).unwrap();
    assert_eq!(t.state.model.params, model.params);
    assert_eq!(t.state.adam, adam);
}

#[test]
fn zero_alignment_weights_leave_gradients_bit_identical() {
    let ds = dataset(9, 6, true, 3);
    let run = tiny_run(4);
    let model = Model::new(&run.model, &run.ablation, &mut rng(3)).unwrap();
    let ep = sample_episode(&ds, &run.train_spec(), &mut rng(4)).unwrap();
    let zero = AlignmentConfig { alpha: 0.0, beta: 0.0, ..Default::default() };
    let with_zero = run_episode(&model, &ep, &zero, Reduction::Sum, ForwardMode::TRAIN).unwrap().grads.unwrap();

    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let eg = build_episode_graph(&mut g, &model, &bound, &ep, &AlignmentConfig::default(), Reduction::Sum, ForwardMode::TRAIN).unwrap();
    g.backward(eg.l_mbc).unwrap();
    let mbc_only = bound.grads(&g);
    assert_eq!(with_zero, mbc_only);
}

#[test]
fn overfits_a_fixed_two_way_episode() {
    let ds = dataset(6, 2, true, 5);
    let ep = Episode::from_ids(&ds, vec![0, 1], vec![(0, 0), (1, 0)], vec![(0, 1), (1, 1)]).unwrap();
    let run = RunConfig {
        episode: EpisodeSpec::new(2, 1, 1, Split::Seen),
        episodes_per_batch: 1,
        total_episodes: 200,
        validation_every: 1000,
        ..tiny_run(200)
    };
    let mut t = Trainer::new(&run, &ds).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        last = t.step_on(core::slice::from_ref(&ep)).unwrap().l_mbc;
    }
    assert!(last < 0.05, "L_mbc after 200 steps: {last}");
}

#[test]
fn training_is_deterministic() {
    let ds = dataset(9, 6, true, 6);
    let run = tiny_run(8);
    let a = train(&run, &ds).unwrap();
    let b = train(&run, &ds).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
    assert_eq!(a.best, b.best);
    let other = train(&RunConfig { seed: 1, ..run }, &ds).unwrap();
    assert_ne!(a.model.params, other.model.params);
}

#[test]
fn evaluation_is_deterministic() {
    let ds = dataset(9, 6, true, 7);
    let model = Model::new(&tiny_model(), &AblationFlags::default(), &mut rng(7)).unwrap();
    let spec = EpisodeSpec::new(3, 1, 2, Split::Unseen);
    let a = evaluate(&model, &ds, &spec, 5, &mut rng(8)).unwrap();
    let b = evaluate(&model, &ds, &spec, 5, &mut rng(8)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_episodes, 5);
    assert!(evaluate(&model, &ds, &spec, 0, &mut rng(8)).is_err());
}

#[test]
fn noise_images_evaluate_at_chance() {
    let ds = dataset(15, 10, false, 9);
    let model = Model::new(&tiny_model(), &AblationFlags::default(), &mut rng(9)).unwrap();
    let spec = EpisodeSpec::new(5, 1, 5, Split::Seen);
    let r = evaluate(&model, &ds, &spec, 200, &mut rng(10)).unwrap();
    assert!((r.mean_accuracy - 20.0).abs() < 3.0, "{}", r.mean_accuracy);
}

#[test]
fn single_episode_has_zero_ci() {
    let ds = dataset(9, 6, true, 11);
    let model = Model::new(&tiny_model(), &AblationFlags::plain(), &mut rng(11)).unwrap();
    let r = evaluate(&model, &ds, &EpisodeSpec::new(3, 1, 2, Split::Unseen), 1, &mut rng(0)).unwrap();
    assert_eq!(r.ci95, 0.0);
    assert_eq!(r.attn_diff, 0.0);
    assert_eq!((r.attn_diff_channel, r.attn_diff_spatial), (None, None));
}

#[test]
fn query_order_does_not_change_predictions() {
    let ds = dataset(9, 6, true, 12);
    let model = Model::new(&tiny_model(), &AblationFlags::default(), &mut rng(12)).unwrap();
    let ep = sample_episode(&ds, &EpisodeSpec::new(3, 1, 3, Split::Seen), &mut rng(13)).unwrap();
    let mut perm: Vec<usize> = (0..ep.n_query()).collect();
    perm.reverse();
    perm.swap(0, 4);
    let q: Vec<_> = perm.iter().map(|&i| ep.query_ids[i]).collect();
    let shuffled = Episode::from_ids(&ds, ep.classes.clone(), ep.support_ids.clone(), q).unwrap();
    let cfg = AlignmentConfig::default();
    let a = run_episode(&model, &ep, &cfg, Reduction::Sum, ForwardMode::EVAL).unwrap();
    let b = run_episode(&model, &shuffled, &cfg, Reduction::Sum, ForwardMode::EVAL).unwrap();
    let n = ep.n_way;
    for (row, &i) in perm.iter().enumerate() {
        assert_eq!(&b.logp.data()[row * n..(row + 1) * n], &a.logp.data()[i * n..(i + 1) * n]);
    }
    assert_eq!(a.stats.correct, b.stats.correct);
    assert!((a.stats.l_mbc - b.stats.l_mbc).abs() < 1e-9);
}

#[test]
fn query_attributes_are_never_read() {
    let ds = dataset(9, 6, true, 14);
    let model = Model::new(&tiny_model(), &AblationFlags::default(), &mut rng(14)).unwrap();
    let ep = sample_episode(&ds, &EpisodeSpec::new(3, 1, 3, Split::Seen), &mut rng(15)).unwrap();
    let mut noisy = ep.clone();
    noisy.query_attributes = rand_tensor(noisy.query_attributes.shape(), &mut rng(16));
    let cfg = AlignmentConfig::default();
    let a = run_episode(&model, &ep, &cfg, Reduction::Sum, ForwardMode::TRAIN).unwrap();
    let b = run_episode(&model, &noisy, &cfg, Reduction::Sum, ForwardMode::TRAIN).unwrap();
    assert_eq!(a.logp, b.logp);
    assert_eq!(a.grads, b.grads);
}

#[test]
fn validation_keeps_the_best_checkpoint() {
    let ds = dataset(9, 6, true, 17);
    let out = train(&tiny_run(12), &ds).unwrap();
    let vals: Vec<f64> = out.log.iter().filter_map(|r| r.val_acc).collect();
    assert_eq!(vals.len(), 3);
    let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.val_acc, Some(best));
    assert_eq!(out.log.len(), 6);
    assert_eq!(out.log.last().unwrap().step, 6);
}

#[test]
fn trainer_rejects_mismatched_dataset() {
    let ds = dataset(9, 6, true, 18);
    let mut run = tiny_run(4);
    run.model.attribute_dim = 5;
    assert!(matches!(Trainer::new(&run, &ds), Err(Error::Config(_))));
    let mut run = tiny_run(4);
    run.model.backbone.input_shape = [3, 16, 16];
    assert!(matches!(Trainer::new(&run, &ds), Err(Error::Config(_))));
    assert!(matches!(Trainer::new(&tiny_run(0), &ds), Err(Error::Config(_))));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let ds = dataset(9, 6, true, 19);
    let run = tiny_run(8);
    let whole = train(&run, &ds).unwrap();
    let mut t = Trainer::new(&run, &ds).unwrap();
    t.run_until(4).unwrap();
    let state = t.state;
    let resumed = Trainer::resume(&run, &ds, state).unwrap().finish().unwrap();
    assert_eq!(whole.model, resumed.model);
    assert_eq!(whole.log, resumed.log);
}

#[test]
fn flip_reverses_rows() {
    let mut img = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    flip_horizontal(&mut img, 3);
    assert_eq!(img, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ci95_is_shift_invariant_and_nonnegative(v in proptest::collection::vec(0.0f64..100.0, 2..40), shift in -50.0f64..50.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        prop_assert!(ci95(&v) >= 0.0);
        prop_assert!((ci95(&v) - ci95(&shifted)).abs() < 1e-9);
    }
}
