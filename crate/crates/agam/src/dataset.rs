//! Dataset manifests (JSON) and loading them into memory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use agam_core::episode::{Class, Dataset, Sample, Splits};
use agam_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_file::read_tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeLevel {
    /// One vector per class, copied onto every sample.
    Category,
    /// One vector per sample.
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    /// Path of an `AGT1` image tensor, relative to the manifest.
    pub image_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_vector: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClass {
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_vector: Option<Vec<f64>>,
    pub samples: Vec<ManifestSample>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSplits {
    pub seen: Vec<u32>,
    pub validation: Vec<u32>,
    pub unseen: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub attribute_dim: usize,
    pub attribute_level: AttributeLevel,
    /// `C×H×W` every image must have.
    pub image_shape: [usize; 3],
    pub classes: Vec<ManifestClass>,
    pub splits: ManifestSplits,
}

impl DatasetManifest {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Split disjointness, known class ids and attribute lengths/ranges.
    pub fn validate(&self) -> Result<()> {
        let mut owner: BTreeMap<u32, &'static str> = BTreeMap::new();
        for c in &self.classes {
            if owner.insert(c.class_id, "").is_some() {
                return Err(Error::Config(format!("duplicate class id {}", c.class_id)));
            }
        }
        let splits = [
            ("seen", &self.splits.seen),
            ("validation", &self.splits.validation),
            ("unseen", &self.splits.unseen),
        ];
        for (name, ids) in splits {
            for &id in ids {
                match owner.get_mut(&id) {
                    None => return Err(Error::Config(format!("split {name} names unknown class {id}"))),
                    Some(slot) if slot.is_empty() => *slot = name,
                    Some(slot) => {
                        return Err(Error::SplitOverlap {
                            class: id,
                            first: slot,
                            second: name,
                        })
                    }
                }
            }
        }
        let check = |what: String, v: &[f64]| -> Result<()> {
            if v.len() != self.attribute_dim {
                return Err(Error::AttributeLength {
                    what,
                    expected: self.attribute_dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::Config(format!("{what}: attribute values must lie in [0, 1]")));
            }
            Ok(())
        };
        for c in &self.classes {
            match (self.attribute_level, &c.attribute_vector) {
                (AttributeLevel::Category, Some(v)) => check(format!("class {}", c.class_id), v)?,
                (AttributeLevel::Category, None) => {
                    return Err(Error::Config(format!(
                        "class {} has no attribute_vector (category-level attributes)",
                        c.class_id
                    )))
                }
                (AttributeLevel::Image, _) => {
                    for (i, s) in c.samples.iter().enumerate() {
                        let what = format!("class {} sample {i}", c.class_id);
                        match &s.attribute_vector {
                            Some(v) => check(what, v)?,
                            None => {
                                return Err(Error::Config(format!(
                                    "{what} has no attribute_vector (image-level attributes)"
                                )))
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates a manifest, then loads every image it references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = DatasetManifest::from_json(&text, manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    dataset_from_manifest(&manifest, &root)
}

/// Loads a dataset whose image paths are relative to `root`.
pub fn dataset_from_manifest(manifest: &DatasetManifest, root: &Path) -> Result<Dataset> {
    dataset_from_parts(manifest, |file| read_tensor(&root.join(file)))
}

/// Builds a dataset from a manifest, obtaining images (in manifest order)
/// from `load`.
pub fn dataset_from_parts(
    manifest: &DatasetManifest,
    mut load: impl FnMut(&str) -> Result<Tensor>,
) -> Result<Dataset> {
    manifest.validate()?;
    let mut classes = Vec::with_capacity(manifest.classes.len());
    for c in &manifest.classes {
        let mut samples = Vec::with_capacity(c.samples.len());
        for s in &c.samples {
            let image = load(&s.image_file)?;
            if image.shape() != manifest.image_shape {
                return Err(Error::ExtentMismatch {
                    path: PathBuf::from(&s.image_file),
                    expected: manifest.image_shape.to_vec(),
                    found: image.shape().to_vec(),
                });
            }
            let attrs = match manifest.attribute_level {
                AttributeLevel::Category => c.attribute_vector.as_ref(),
                AttributeLevel::Image => s.attribute_vector.as_ref(),
            }
            .expect("validated");
            samples.push(Sample {
                image,
                attributes: Tensor::from_vec(attrs.clone()),
            });
        }
        classes.push(Class {
            id: c.class_id,
            samples,
        });
    }
    let pos: BTreeMap<u32, usize> = manifest
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.class_id, i))
        .collect();
    let map = |ids: &[u32]| ids.iter().map(|id| pos[id]).collect();
    let dataset = Dataset {
        name: manifest.name.clone(),
        attribute_dim: manifest.attribute_dim,
        image_shape: manifest.image_shape,
        classes,
        splits: Splits {
            seen: map(&manifest.splits.seen),
            validation: map(&manifest.splits.validation),
            unseen: map(&manifest.splits.unseen),
        },
    };
    dataset.validate()?;
    Ok(dataset)
}
