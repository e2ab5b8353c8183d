//! Metric-based classifiers over embeddings and the query classification
//! loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Protonet,
    Matching,
    Relation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over queries.
    #[default]
    Sum,
    Mean,
}

/// `N×S` matrix averaging the supports of each class.
fn class_average_matrix(labels: &[usize], n_way: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; n_way];
    for &y in labels {
        if y >= n_way {
            return Err(Error::contract(format!("support label {y} outside 0..{n_way}")));
        }
        counts[y] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::contract(format!("class {missing} has no support samples")));
    }
    let s = labels.len();
    let mut m = Tensor::zeros(&[n_way, s]);
    for (j, &y) in labels.iter().enumerate() {
        m.data_mut()[y * s + j] = 1.0 / counts[y] as f64;
    }
    Ok(m)
}

/// Class prototypes: the mean support embedding of each class (`N×E`).
pub fn prototypes(g: &mut Graph, support: Var, labels: &[usize], n_way: usize) -> Result<Var> {
    if g.shape(support).first() != Some(&labels.len()) {
        return Err(Error::shape(format!(
            "prototypes: {} labels for supports of shape {:?}",
            labels.len(),
            g.shape(support)
        )));
    }
    let avg = class_average_matrix(labels, n_way)?;
    let avg = g.constant(avg);
    g.matmul(avg, support)
}

/// `log softmax(−‖q − p_n‖²)` for every query row (`Q×N`).
pub fn protonet_logp(g: &mut Graph, queries: Var, prototypes: Var) -> Result<Var> {
    let d = g.sq_dist(queries, prototypes)?;
    let neg = g.neg(d);
    g.log_softmax(neg)
}

/// Matching-network log-probabilities: softmax attention over cosine
/// similarities to every support, with the attention mass summed per class.
pub fn matchingnet_logp(
    g: &mut Graph,
    queries: Var,
    support: Var,
    labels: &[usize],
    n_way: usize,
) -> Result<Var> {
    let s = g.shape(support)[0];
    if s != labels.len() {
        return Err(Error::shape("matchingnet: support/label count mismatch"));
    }
    let mut onehot = Tensor::zeros(&[s, n_way]);
    for (j, &y) in labels.iter().enumerate() {
        if y >= n_way {
            return Err(Error::contract(format!("support label {y} outside 0..{n_way}")));
        }
        onehot.data_mut()[j * n_way + y] = 1.0;
    }
    let cos = g.cosine(queries, support)?;
    let la = g.log_softmax(cos)?;
    let att = g.exp(la);
    let onehot = g.constant(onehot);
    let p = g.matmul(att, onehot)?;
    Ok(g.log(p))
}

/// `−Σ_b log p(y_b | q_b)`, optionally divided by the query count.
pub fn metric_classification_loss(
    g: &mut Graph,
    logp: Var,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Var> {
    let l = g.nll_sum(logp, labels)?;
    Ok(match reduction {
        Reduction::Sum => l,
        Reduction::Mean => g.scale(l, 1.0 / labels.len().max(1) as f64),
    })
}

/// Relation module: a 3×3 convolution over the concatenated query/class
/// pair, ReLU, 2×2 max-pool when the map allows it, then two fully
/// connected layers and a sigmoid score.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationParams {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

const RELATION_FIELDS: [&str; 6] = ["conv.w", "conv.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"];

fn relation_flat(c: usize, h: usize, w: usize) -> usize {
    if h >= 2 && w >= 2 {
        c * (h / 2) * (w / 2)
    } else {
        c * h * w
    }
}

impl RelationParams {
    pub fn init<R: Rng + ?Sized>(c: usize, h: usize, w: usize, hidden: usize, rng: &mut R) -> Self {
        let flat = relation_flat(c, h, w);
        RelationParams {
            conv_w: fan_in_uniform(&[c, 2 * c, 3, 3], 2 * c * 9, rng),
            conv_b: Tensor::zeros(&[c]),
            fc1_w: fan_in_uniform(&[hidden, flat, 1, 1], flat, rng),
            fc1_b: Tensor::zeros(&[hidden]),
            fc2_w: fan_in_uniform(&[1, hidden, 1, 1], hidden, rng),
            fc2_b: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros(c: usize, h: usize, w: usize, hidden: usize) -> Self {
        let flat = relation_flat(c, h, w);
        RelationParams {
            conv_w: Tensor::zeros(&[c, 2 * c, 3, 3]),
            conv_b: Tensor::zeros(&[c]),
            fc1_w: Tensor::zeros(&[hidden, flat, 1, 1]),
            fc1_b: Tensor::zeros(&[hidden]),
            fc2_w: Tensor::zeros(&[1, hidden, 1, 1]),
            fc2_b: Tensor::zeros(&[1]),
        }
    }

    pub fn insert_into(&self, store: &mut ParamStore) {
        let ts = [
            &self.conv_w,
            &self.conv_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ];
        for (f, t) in RELATION_FIELDS.iter().zip(ts) {
            store.insert(format!("head.relation.{f}"), t.clone());
        }
    }
}

/// Graph handles of the relation module.
#[derive(Clone, Copy, Debug)]
pub struct RelationVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl RelationVars {
    pub fn from_bound(bound: &Bound) -> Result<Self> {
        let v = |f: &str| bound.var(&format!("head.relation.{f}"));
        Ok(RelationVars {
            conv_w: v("conv.w")?,
            conv_b: v("conv.b")?,
            fc1_w: v("fc1.w")?,
            fc1_b: v("fc1.b")?,
            fc2_w: v("fc2.w")?,
            fc2_b: v("fc2.b")?,
        })
    }

    pub fn bind(g: &mut Graph, p: &RelationParams) -> Self {
        RelationVars {
            conv_w: g.param(p.conv_w.clone()),
            conv_b: g.param(p.conv_b.clone()),
            fc1_w: g.param(p.fc1_w.clone()),
            fc1_b: g.param(p.fc1_b.clone()),
            fc2_w: g.param(p.fc2_w.clone()),
            fc2_b: g.param(p.fc2_b.clone()),
        }
    }
}

/// Mean refined map of each class (`N×C×H×W`) from support maps.
pub fn class_mean_maps(g: &mut Graph, support_maps: Var, labels: &[usize], n_way: usize) -> Result<Var> {
    let shape = g.shape(support_maps).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("class_mean_maps: expected N×C×H×W support maps"));
    }
    let flat = g.flatten_rows(support_maps)?;
    let means = prototypes(g, flat, labels, n_way)?;
    g.reshape(means, &[n_way, shape[1], shape[2], shape[3]])
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    let inner: usize = g.shape(x)[1..].iter().product();
    let x4 = g.reshape(x, &[rows, inner, 1, 1])?;
    let y = g.conv2d(x4, w, b, 0)?;
    g.flatten_rows(y)
}

/// Relation scores in `(0, 1)` for every (query, class) pair: `Q×N`.
pub fn relationnet_scores(g: &mut Graph, rv: &RelationVars, query_maps: Var, class_maps: Var) -> Result<Var> {
    let (qs, cs) = (g.shape(query_maps).to_vec(), g.shape(class_maps).to_vec());
    if qs.len() != 4 || cs.len() != 4 || qs[1..] != cs[1..] {
        return Err(Error::shape(format!(
            "relation: query maps {qs:?} and class maps {cs:?} cannot be paired"
        )));
    }
    let (q, n) = (qs[0], cs[0]);
    let q_idx: Vec<usize> = (0..q).flat_map(|i| core::iter::repeat(i).take(n)).collect();
    let c_idx: Vec<usize> = (0..q).flat_map(|_| 0..n).collect();
    let qa = g.gather(query_maps, &q_idx)?;
    let ca = g.gather(class_maps, &c_idx)?;
    let pair = g.concat_channels(qa, ca)?;
    let h = g.conv2d(pair, rv.conv_w, rv.conv_b, 1)?;
    let mut h = g.relu(h);
    if qs[2] >= 2 && qs[3] >= 2 {
        h = g.max_pool2(h)?;
    }
    let h = linear(g, h, rv.fc1_w, rv.fc1_b)?;
    let h = g.relu(h);
    let s = linear(g, h, rv.fc2_w, rv.fc2_b)?;
    let s = g.sigmoid(s);
    g.reshape(s, &[q, n])
}

/// `log(score_n / Σ_m score_m)`: relation scores renormalized into the shared
/// log-probability interface.
pub fn relation_logp(g: &mut Graph, scores: Var) -> Result<Var> {
    let l = g.log(scores);
    g.log_softmax(l)
}

/// `Σ (score − onehot)²` over all (query, class) pairs.
pub fn relation_mse_loss(g: &mut Graph, scores: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
    let (q, n) = match *g.shape(scores) {
        [q, n] => (q, n),
        ref s => return Err(Error::shape(format!("relation loss: scores {s:?}"))),
    };
    if labels.len() != q {
        return Err(Error::shape("relation loss: label count"));
    }
    let mut target = Tensor::zeros(&[q, n]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::contract(format!("label {y} outside 0..{n}")));
        }
        target.data_mut()[i * n + y] = 1.0;
    }
    let t = g.constant(target);
    let d = g.sub(scores, t)?;
    let sq = g.mul(d, d)?;
    let l = g.sum(sq);
    Ok(match reduction {
        Reduction::Sum => l,
        Reduction::Mean => g.scale(l, 1.0 / q.max(1) as f64),
    })
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let n = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(n.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
