mod common;

use agam::synth::{generate_synthetic, synthesize, SynthSpec};
use agam::Error;
use agam_core::Tensor;

use common::{small_spec, snapshot_dir};

#[test]
fn noiseless_without_distractors_gives_identical_samples() {
    let spec = SynthSpec {
        noise_sd: 0.0,
        distractor_count: 0,
        ..small_spec()
    };
    let s = synthesize(&spec, 5).unwrap();
    for class in &s.images {
        for img in &class[1..] {
            assert_eq!(img, &class[0]);
        }
    }
    // Distinct attribute vectors paint distinct images.
    for i in 0..s.images.len() {
        for j in i + 1..s.images.len() {
            assert_ne!(s.images[i][0], s.images[j][0], "classes {i} and {j}");
        }
    }
}

#[test]
fn same_seed_gives_byte_identical_directories() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&small_spec(), 11, a.path()).unwrap();
    generate_synthetic(&small_spec(), 11, b.path()).unwrap();
    let (sa, sb) = (snapshot_dir(a.path()), snapshot_dir(b.path()));
    assert_eq!(sa.len(), 1 + 15 * 4);
    assert!(sa == sb, "directories differ");
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&small_spec(), 12, c.path()).unwrap();
    assert!(snapshot_dir(c.path()) != sa);
}

#[test]
fn generation_is_a_pure_function_of_spec_and_seed() {
    let a = synthesize(&small_spec(), 4).unwrap();
    let b = synthesize(&small_spec(), 4).unwrap();
    assert_eq!(a, b);
}

fn centroid(imgs: &[Tensor]) -> Vec<f64> {
    let mut c = vec![0.0; imgs[0].len()];
    for img in imgs {
        for (s, v) in c.iter_mut().zip(img.data()) {
            *s += v / imgs.len() as f64;
        }
    }
    c
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn nearest_centroid_is_perfect_on_noiseless_seen_classes() {
    let spec = SynthSpec {
        noise_sd: 0.0,
        distractor_count: 0,
        ..SynthSpec::default()
    };
    let s = synthesize(&spec, 0).unwrap();
    let seen: Vec<usize> = s.manifest.splits.seen.iter().map(|&id| id as usize).collect();
    let centroids: Vec<Vec<f64>> = seen.iter().map(|&k| centroid(&s.images[k])).collect();
    let mut correct = 0;
    let mut total = 0;
    for (ci, &k) in seen.iter().enumerate() {
        for img in &s.images[k] {
            let best = (0..centroids.len())
                .min_by(|&a, &b| sq(img.data(), &centroids[a]).total_cmp(&sq(img.data(), &centroids[b])))
                .unwrap();
            correct += usize::from(best == ci);
            total += 1;
        }
    }
    assert_eq!(correct, total);
}

#[test]
fn attributes_match_painted_patches() {
    let spec = SynthSpec {
        noise_sd: 0.0,
        distractor_count: 0,
        ..small_spec()
    };
    let s = synthesize(&spec, 9).unwrap();
    // D=4 on 8×8: attribute d owns the 4×4 cell (d/2, d%2), inset by one.
    for (class, imgs) in s.manifest.classes.iter().zip(&s.images) {
        let attrs = class.attribute_vector.as_ref().unwrap();
        for (d, &a) in attrs.iter().enumerate() {
            let (r, c) = (4 * (d / 2) + 1, 4 * (d % 2) + 1);
            let v = imgs[0].data()[r * 8 + c];
            assert_eq!(v != 0.0, a == 1.0, "class {} attribute {d}", class.class_id);
        }
        assert!(attrs.iter().any(|&a| a == 1.0));
    }
}

#[test]
fn too_few_classes_is_rejected() {
    let spec = SynthSpec {
        n_classes: 3,
        ..small_spec()
    };
    let e = synthesize(&spec, 0).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    assert!(e.to_string().contains("need ≥ 6 classes"), "{e}");
}

#[test]
fn exhausted_attribute_vectors_are_an_error() {
    // Four attributes admit only 15 non-empty vectors.
    let spec = SynthSpec {
        n_classes: 16,
        ..small_spec()
    };
    let e = synthesize(&spec, 0).unwrap_err();
    assert!(e.to_string().contains("redraws"), "{e}");
}

#[test]
fn split_is_sixty_twenty_twenty() {
    let s = synthesize(&SynthSpec::default(), 0).unwrap();
    let n = s.manifest.classes.len();
    assert_eq!(s.manifest.splits.seen.len(), n * 3 / 5);
    assert_eq!(s.manifest.splits.validation.len(), n / 5);
    assert_eq!(s.manifest.splits.unseen.len(), n / 5);
}
