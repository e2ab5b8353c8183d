//! In-memory datasets and N-way K-shot episode sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// One image with its (image-level or copied category-level) attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub attributes: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Class {
    pub id: u32,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Seen,
    Validation,
    Unseen,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Validation => "validation",
            Split::Unseen => "unseen",
        }
    }
}

/// Class positions (indices into [`Dataset::classes`]) of each split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub seen: Vec<usize>,
    pub validation: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Seen => &self.seen,
            Split::Validation => &self.validation,
            Split::Unseen => &self.unseen,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub attribute_dim: usize,
    pub image_shape: [usize; 3],
    pub classes: Vec<Class>,
    pub splits: Splits,
}

impl Dataset {
    /// Checks shapes, attribute ranges and split disjointness.
    pub fn validate(&self) -> Result<()> {
        for class in &self.classes {
            for (i, s) in class.samples.iter().enumerate() {
                if s.image.shape() != self.image_shape {
                    return Err(Error::shape(format!(
                        "class {} sample {i}: image {:?}, expected {:?}",
                        class.id,
                        s.image.shape(),
                        self.image_shape
                    )));
                }
                if s.attributes.shape() != [self.attribute_dim] {
                    return Err(Error::shape(format!(
                        "class {} sample {i}: attribute length {}, expected {}",
                        class.id,
                        s.attributes.len(),
                        self.attribute_dim
                    )));
                }
                if s.attributes.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::config(format!(
                        "class {} sample {i}: attribute values must lie in [0, 1]",
                        class.id
                    )));
                }
            }
        }
        let mut owner = alloc::vec![None; self.classes.len()];
        for split in [Split::Seen, Split::Validation, Split::Unseen] {
            for &c in self.splits.get(split) {
                let slot = owner
                    .get_mut(c)
                    .ok_or_else(|| Error::config(format!("split {} names unknown class {c}", split.name())))?;
                if let Some(prev) = slot.replace(split) {
                    return Err(Error::config(format!(
                        "split overlap: class {} is in both {} and {}",
                        self.classes[c].id,
                        Split::name(prev),
                        split.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn default_q() -> usize {
    15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    #[serde(default = "default_q")]
    pub q_per_class: usize,
    #[serde(default)]
    pub split: Split,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_way: 5,
            k_shot: 1,
            q_per_class: 15,
            split: Split::Seen,
        }
    }
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, q_per_class: usize, split: Split) -> Self {
        EpisodeSpec {
            n_way,
            k_shot,
            q_per_class,
            split,
        }
    }

    pub fn with_split(&self, split: Split) -> Self {
        EpisodeSpec { split, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::config(format!("n_way must be ≥ 2, got {}", self.n_way)));
        }
        if self.k_shot < 1 {
            return Err(Error::config("k_shot must be ≥ 1"));
        }
        Ok(())
    }

    pub fn n_support(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn n_query(&self) -> usize {
        self.n_way * self.q_per_class
    }
}

/// A materialized episode. Supports and queries are class-major with labels
/// `0..N` in class draw order.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    /// `S×C×H×W`.
    pub support_images: Tensor,
    /// `S×D`.
    pub support_attributes: Tensor,
    pub support_labels: Vec<usize>,
    /// `Q×C×H×W`.
    pub query_images: Tensor,
    /// `Q×D`; never read by the model.
    pub query_attributes: Tensor,
    pub query_labels: Vec<usize>,
    /// Dataset class position of each episode label.
    pub classes: Vec<usize>,
    /// `(class position, sample index)` of each support.
    pub support_ids: Vec<(usize, usize)>,
    pub query_ids: Vec<(usize, usize)>,
}

impl Episode {
    pub fn n_support(&self) -> usize {
        self.support_labels.len()
    }

    pub fn n_query(&self) -> usize {
        self.query_labels.len()
    }

    /// Builds an episode from explicit sample ids (class-major).
    pub fn from_ids(
        dataset: &Dataset,
        classes: Vec<usize>,
        support_ids: Vec<(usize, usize)>,
        query_ids: Vec<(usize, usize)>,
    ) -> Result<Episode> {
        let label = |c: usize| classes.iter().position(|&x| x == c).expect("class in episode");
        let stack = |ids: &[(usize, usize)], attrs: bool| -> Result<Tensor> {
            let items: Vec<&Tensor> = ids
                .iter()
                .map(|&(c, i)| {
                    let s = &dataset.classes[c].samples[i];
                    if attrs {
                        &s.attributes
                    } else {
                        &s.image
                    }
                })
                .collect();
            if items.is_empty() {
                let inner: Vec<usize> = if attrs {
                    alloc::vec![dataset.attribute_dim]
                } else {
                    dataset.image_shape.to_vec()
                };
                let mut shape = alloc::vec![0];
                shape.extend(inner);
                return Ok(Tensor::zeros(&shape));
            }
            Tensor::stack(&items)
        };
        Ok(Episode {
            n_way: classes.len(),
            support_images: stack(&support_ids, false)?,
            support_attributes: stack(&support_ids, true)?,
            support_labels: support_ids.iter().map(|&(c, _)| label(c)).collect(),
            query_images: stack(&query_ids, false)?,
            query_attributes: stack(&query_ids, true)?,
            query_labels: query_ids.iter().map(|&(c, _)| label(c)).collect(),
            classes,
            support_ids,
            query_ids,
        })
    }
}

/// Draws N classes of the split without replacement, then K + q distinct
/// samples of each; the first K are supports.
pub fn sample_episode<R: Rng + ?Sized>(dataset: &Dataset, spec: &EpisodeSpec, rng: &mut R) -> Result<Episode> {
    spec.validate()?;
    let pool = dataset.splits.get(spec.split);
    if pool.len() < spec.n_way {
        return Err(Error::Capacity(format!(
            "{} split has {} classes, a {}-way episode needs {}",
            spec.split.name(),
            pool.len(),
            spec.n_way,
            spec.n_way
        )));
    }
    let per_class = spec.k_shot + spec.q_per_class;
    let picks = sample(rng, pool.len(), spec.n_way);
    let classes: Vec<usize> = picks.iter().map(|i| pool[i]).collect();
    let mut support_ids = Vec::with_capacity(spec.n_support());
    let mut query_ids = Vec::with_capacity(spec.n_query());
    for &c in &classes {
        let n = dataset.classes[c].samples.len();
        if n < per_class {
            return Err(Error::Capacity(format!(
                "class {} has {n} samples, an episode needs {} support + {} query",
                dataset.classes[c].id, spec.k_shot, spec.q_per_class
            )));
        }
        let idx = sample(rng, n, per_class);
        for (j, i) in idx.iter().enumerate() {
            if j < spec.k_shot {
                support_ids.push((c, i));
            } else {
                query_ids.push((c, i));
            }
        }
    }
    Episode::from_ids(dataset, classes, support_ids, query_ids)
}

#[cfg(test)]
mod tests;
