//! Synthetic attribute-driven image dataset.
//!
//! Every attribute owns a cell of a square grid over the image and a
//! distinct appearance: a sign pattern across channels combined with one of
//! four textures (flat, horizontal stripes, vertical stripes, checker). A sample of a class paints the patch of each
//! of the class's active attributes, then `distractor_count` patches of
//! randomly chosen attributes (active or not), then Gaussian pixel noise.
//! The attributes therefore say exactly which painted regions are genuine.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use agam_core::episode::Dataset;
use agam_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    dataset_from_parts, AttributeLevel, DatasetManifest, ManifestClass, ManifestSample,
    ManifestSplits, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::tensor_file::write_tensor;

const MAX_REDRAWS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub attribute_dim: usize,
    pub image_shape: [usize; 3],
    pub noise_sd: f64,
    pub distractor_count: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 40,
            samples_per_class: 20,
            attribute_dim: 16,
            image_shape: [3, 32, 32],
            noise_sd: 1.0,
            distractor_count: 6,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 6 {
            return Err(Error::Config(format!(
                "need ≥ 6 classes for a seen/validation/unseen split, got {}",
                self.n_classes
            )));
        }
        if self.attribute_dim < 4 {
            return Err(Error::Config(format!(
                "need ≥ 4 attributes, got {}",
                self.attribute_dim
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be ≥ 1".into()));
        }
        let [c, h, w] = self.image_shape;
        let g = grid_side(self.attribute_dim);
        if c == 0 || h < g || w < g {
            return Err(Error::Config(format!(
                "image shape {:?} cannot hold a {g}×{g} attribute grid",
                self.image_shape
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config("noise_sd must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// `(seen, validation, unseen)` class counts: 20% each for validation and
    /// unseen (at least one), the rest seen.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let held = (self.n_classes / 5).max(1);
        (self.n_classes - 2 * held, held, held)
    }
}

const TEXTURES: usize = 4;

fn texture(kind: usize, r: usize, c: usize) -> f64 {
    let on = match kind {
        0 => true,
        1 => r % 2 == 0,
        2 => c % 2 == 0,
        _ => (r + c) % 2 == 0,
    };
    if on {
        1.0
    } else {
        -1.0
    }
}

fn grid_side(d: usize) -> usize {
    (1..).find(|g| g * g >= d).expect("finite")
}

/// Pixel rectangle `(row0, row1, col0, col1)` painted by attribute `d`.
fn patch_rect(spec: &SynthSpec, d: usize) -> (usize, usize, usize, usize) {
    let [_, h, w] = spec.image_shape;
    let g = grid_side(spec.attribute_dim);
    let (gr, gc) = (d / g, d % g);
    let (ch, cw) = (h / g, w / g);
    let inset = |size: usize| if size >= 4 { 1 } else { 0 };
    let (r0, c0) = (gr * ch, gc * cw);
    (r0 + inset(ch), r0 + ch - inset(ch), c0 + inset(cw), c0 + cw - inset(cw))
}

/// A generated dataset held in memory, values already rounded to `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub manifest: DatasetManifest,
    /// `images[class][sample]`.
    pub images: Vec<Vec<Tensor>>,
    /// Channel amplitudes of each attribute (`D×C`).
    pub signatures: Tensor,
}

fn image_file(class: usize, sample: usize) -> String {
    format!("images/c{class:03}_s{sample:03}.agt")
}

/// Pure function of `(spec, seed)`.
pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = spec.image_shape;
    let d = spec.attribute_dim;
    // Distinct (sign pattern, texture) combinations while they last.
    let combos = (1usize << c.min(16)) * TEXTURES;
    let mut order: Vec<usize> = (0..combos).collect();
    order.shuffle(&mut rng);
    let mut signatures = Tensor::zeros(&[d, c]);
    let mut textures = Vec::with_capacity(d);
    for a in 0..d {
        let combo = order[a % combos];
        textures.push(combo % TEXTURES);
        let signs = combo / TEXTURES;
        for ch in 0..c {
            let sign = if ch < 16 && signs >> ch & 1 == 1 { -1.0 } else { 1.0 };
            signatures.data_mut()[a * c + ch] = sign * rng.gen_range(0.5..1.0);
        }
    }

    let mut seen_vectors = BTreeSet::new();
    let mut class_attrs = Vec::with_capacity(spec.n_classes);
    for k in 0..spec.n_classes {
        let mut tries = 0;
        let v = loop {
            let v: Vec<bool> = (0..d).map(|_| rng.gen_bool(0.5)).collect();
            if v.iter().any(|&b| b) && seen_vectors.insert(v.clone()) {
                break v;
            }
            tries += 1;
            if tries >= MAX_REDRAWS {
                return Err(Error::Config(format!(
                    "class {k}: no distinct attribute vector after {MAX_REDRAWS} redraws"
                )));
            }
        };
        class_attrs.push(v);
    }

    let noise = Normal::new(0.0, spec.noise_sd).expect("validated sd");
    let paint = |img: &mut [f64], a: usize| {
        let (r0, r1, c0, c1) = patch_rect(spec, a);
        for ch in 0..c {
            let v = signatures.data()[a * c + ch];
            for r in r0..r1 {
                for col in c0..c1 {
                    img[ch * h * w + r * w + col] = v * texture(textures[a], r - r0, col - c0);
                }
            }
        }
    };
    let mut images = Vec::with_capacity(spec.n_classes);
    let mut classes = Vec::with_capacity(spec.n_classes);
    for (k, attrs) in class_attrs.iter().enumerate() {
        let mut per_class = Vec::with_capacity(spec.samples_per_class);
        let mut samples = Vec::with_capacity(spec.samples_per_class);
        for s in 0..spec.samples_per_class {
            let mut img = vec![0.0; c * h * w];
            for a in (0..d).filter(|&a| attrs[a]) {
                paint(&mut img, a);
            }
            for _ in 0..spec.distractor_count {
                let a = rng.gen_range(0..d);
                paint(&mut img, a);
            }
            if spec.noise_sd > 0.0 {
                for v in &mut img {
                    *v += noise.sample(&mut rng);
                }
            }
            let mut t = Tensor::new(spec.image_shape.to_vec(), img)?;
            t.round_to_f32();
            per_class.push(t);
            samples.push(ManifestSample {
                image_file: image_file(k, s),
                attribute_vector: None,
            });
        }
        images.push(per_class);
        classes.push(ManifestClass {
            class_id: k as u32,
            attribute_vector: Some(attrs.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()),
            samples,
        });
    }

    let (n_seen, n_val, _) = spec.split_sizes();
    let ids: Vec<u32> = (0..spec.n_classes as u32).collect();
    let manifest = DatasetManifest {
        name: format!("synthetic-{seed}"),
        attribute_dim: d,
        attribute_level: AttributeLevel::Category,
        image_shape: spec.image_shape,
        classes,
        splits: ManifestSplits {
            seen: ids[..n_seen].to_vec(),
            validation: ids[n_seen..n_seen + n_val].to_vec(),
            unseen: ids[n_seen + n_val..].to_vec(),
        },
    };
    Ok(Synthetic {
        manifest,
        images,
        signatures,
    })
}

impl Synthetic {
    /// The in-memory dataset, identical to loading the written directory.
    pub fn dataset(&self) -> Result<Dataset> {
        let mut images = self.images.iter().flatten();
        dataset_from_parts(&self.manifest, |file| {
            images.next().cloned().ok_or_else(|| Error::MissingFile(file.into()))
        })
    }

    /// Writes `manifest.json` and one tensor file per image under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
        for (c, per_class) in self.manifest.classes.iter().zip(&self.images) {
            for (s, img) in c.samples.iter().zip(per_class) {
                write_tensor(&dir.join(&s.image_file), img)?;
            }
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_json()).map_err(|e| Error::io(&path, e))
    }
}

/// Generates a dataset and writes it to `dir`.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64, dir: &Path) -> Result<Synthetic> {
    let s = synthesize(spec, seed)?;
    s.write(dir)?;
    Ok(s)
}
