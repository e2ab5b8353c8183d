use super::*;
use crate::testutil::rng;
use alloc::collections::BTreeSet;
use alloc::vec;
use proptest::prelude::*;

/// `n` classes of `per` samples; image value encodes (class, sample).
fn toy(n: usize, per: usize, splits: Splits) -> Dataset {
    let classes = (0..n)
        .map(|c| Class {
            id: 100 + c as u32,
            samples: (0..per)
                .map(|i| Sample {
                    image: Tensor::full(&[1, 2, 2], (c * 1000 + i) as f64),
                    attributes: Tensor::full(&[3], c as f64 / n as f64),
                })
                .collect(),
        })
        .collect();
    Dataset { name: "toy".into(), attribute_dim: 3, image_shape: [1, 2, 2], classes, splits }
}

fn seen_only(n: usize, per: usize) -> Dataset {
    toy(n, per, Splits { seen: (0..n).collect(), ..Default::default() })
}

#[test]
fn episode_layout_and_labels() {
    let ds = seen_only(6, 10);
    let spec = EpisodeSpec::new(5, 2, 3, Split::Seen);
    let ep = sample_episode(&ds, &spec, &mut rng(0)).unwrap();
    assert_eq!(ep.support_images.shape(), &[10, 1, 2, 2]);
    assert_eq!(ep.support_attributes.shape(), &[10, 3]);
    assert_eq!(ep.query_images.shape(), &[15, 1, 2, 2]);
    assert_eq!(ep.support_labels, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
    assert_eq!(ep.query_labels, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]);
    for (row, &(c, i)) in ep.support_ids.iter().enumerate() {
        assert_eq!(ep.support_images.data()[row * 4], (c * 1000 + i) as f64);
        assert_eq!(ep.classes[ep.support_labels[row]], c);
    }
}

#[test]
fn support_and_query_disjoint_over_1000_episodes() {
    let ds = seen_only(8, 12);
    let spec = EpisodeSpec::new(5, 1, 5, Split::Seen);
    let mut r = rng(1);
    for _ in 0..1000 {
        let ep = sample_episode(&ds, &spec, &mut r).unwrap();
        let s: BTreeSet<_> = ep.support_ids.iter().copied().collect();
        let q: BTreeSet<_> = ep.query_ids.iter().copied().collect();
        assert_eq!(s.len(), 5);
        assert_eq!(q.len(), 25);
        assert!(s.is_disjoint(&q));
        let cls: BTreeSet<_> = ep.classes.iter().copied().collect();
        assert_eq!(cls.len(), 5);
    }
}

#[test]
fn class_frequency_is_uniform() {
    // 5 of 10 classes per episode: each class appears with probability 1/2.
    let ds = seen_only(10, 2);
    let spec = EpisodeSpec::new(5, 1, 1, Split::Seen);
    let mut r = rng(2);
    let mut counts = [0usize; 10];
    let draws = 10_000;
    for _ in 0..draws {
        for &c in &sample_episode(&ds, &spec, &mut r).unwrap().classes {
            counts[c] += 1;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        let f = n as f64 / draws as f64;
        assert!((f - 0.5).abs() <= 0.02, "class {c}: {f}");
    }
}

#[test]
fn exhaustive_case_uses_every_sample() {
    let ds = seen_only(5, 4);
    let spec = EpisodeSpec::new(5, 1, 3, Split::Seen);
    let ep = sample_episode(&ds, &spec, &mut rng(3)).unwrap();
    let all: BTreeSet<_> = ep.support_ids.iter().chain(&ep.query_ids).copied().collect();
    assert_eq!(all.len(), 20);
    let classes: BTreeSet<_> = ep.classes.iter().copied().collect();
    assert_eq!(classes, (0..5).collect());
}

#[test]
fn sampling_is_deterministic_under_seed() {
    let ds = seen_only(9, 8);
    let spec = EpisodeSpec::new(5, 1, 3, Split::Seen);
    let a = sample_episode(&ds, &spec, &mut rng(4)).unwrap();
    let b = sample_episode(&ds, &spec, &mut rng(4)).unwrap();
    assert_eq!(a, b);
    let c = sample_episode(&ds, &spec, &mut rng(5)).unwrap();
    assert_ne!(a.support_ids, c.support_ids);
}

#[test]
fn capacity_errors() {
    let ds = seen_only(4, 6);
    let e = sample_episode(&ds, &EpisodeSpec::new(5, 1, 1, Split::Seen), &mut rng(0)).unwrap_err();
    assert!(matches!(e, Error::Capacity(ref m) if m.contains("4 classes")), "{e}");
    let e = sample_episode(&ds, &EpisodeSpec::new(2, 2, 5, Split::Seen), &mut rng(0)).unwrap_err();
    assert!(matches!(e, Error::Capacity(ref m) if m.contains("6 samples")), "{e}");
    let e = sample_episode(&ds, &EpisodeSpec::new(2, 1, 1, Split::Unseen), &mut rng(0)).unwrap_err();
    assert!(matches!(e, Error::Capacity(_)));
    assert!(matches!(EpisodeSpec::new(1, 1, 1, Split::Seen).validate(), Err(Error::Config(_))));
    assert!(matches!(EpisodeSpec::new(2, 0, 1, Split::Seen).validate(), Err(Error::Config(_))));
}

#[test]
fn zero_queries_allowed() {
    let ds = seen_only(3, 2);
    let ep = sample_episode(&ds, &EpisodeSpec::new(2, 1, 0, Split::Seen), &mut rng(6)).unwrap();
    assert_eq!(ep.n_query(), 0);
    assert_eq!(ep.query_images.shape(), &[0, 1, 2, 2]);
}

#[test]
fn episodes_respect_split() {
    let splits = Splits { seen: vec![0, 1, 2], validation: vec![3, 4], unseen: vec![5, 6, 7] };
    let ds = toy(8, 3, splits);
    let mut r = rng(7);
    for _ in 0..200 {
        let ep = sample_episode(&ds, &EpisodeSpec::new(3, 1, 1, Split::Unseen), &mut r).unwrap();
        assert!(ep.classes.iter().all(|c| (5..8).contains(c)));
    }
}

#[test]
fn dataset_validation() {
    let ok = toy(4, 2, Splits { seen: vec![0, 1], validation: vec![2], unseen: vec![3] });
    ok.validate().unwrap();
    let mut overlap = ok.clone();
    overlap.splits.unseen.push(1);
    let e = overlap.validate().unwrap_err();
    assert!(e.to_string().contains("class 101 is in both seen and unseen"), "{e}");
    let mut bad = ok.clone();
    bad.classes[0].samples[0].attributes = Tensor::zeros(&[2]);
    assert!(matches!(bad.validate(), Err(Error::Shape(_))));
    let mut range = ok.clone();
    range.classes[0].samples[0].attributes = Tensor::full(&[3], 1.5);
    assert!(matches!(range.validate(), Err(Error::Config(_))));
    let mut unknown = ok;
    unknown.splits.seen.push(9);
    assert!(matches!(unknown.validate(), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_in_range_and_ids_distinct(seed in 0u64..10_000, n in 2usize..6, k in 1usize..3, q in 0usize..3) {
        let ds = seen_only(7, 6);
        let ep = sample_episode(&ds, &EpisodeSpec::new(n, k, q, Split::Seen), &mut rng(seed)).unwrap();
        prop_assert!(ep.support_labels.iter().chain(&ep.query_labels).all(|&l| l < n));
        let ids: BTreeSet<_> = ep.support_ids.iter().chain(&ep.query_ids).collect();
        prop_assert_eq!(ids.len(), n * (k + q));
        prop_assert_eq!(ep.n_support(), n * k);
    }
}
