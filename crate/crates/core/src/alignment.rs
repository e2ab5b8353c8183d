//! Attention alignment between the attributes-guided (teacher) and
//! self-guided (student) branches, the total loss, and the attention
//! difference diagnostic.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::agam::AgamResult;
use crate::autodiff::{Graph, Var, NORM_FLOOR};
use crate::tensor::Tensor;
use crate::{math, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignmentLoss {
    #[default]
    #[serde(rename = "soft-margin")]
    SoftMargin,
    L1,
    #[serde(rename = "MSE")]
    Mse,
    #[serde(rename = "smoothL1")]
    SmoothL1,
}

impl core::str::FromStr for AlignmentLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft-margin" => Ok(Self::SoftMargin),
            "L1" => Ok(Self::L1),
            "MSE" => Ok(Self::Mse),
            "smoothL1" => Ok(Self::SmoothL1),
            other => Err(Error::config(format!(
                "unknown alignment loss `{other}` (expected soft-margin, L1, MSE or smoothL1)"
            ))),
        }
    }
}

/// Whether channel and spatial maps are normalized separately or as one
/// concatenated vector per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Separate,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub loss_type: AlignmentLoss,
    pub alpha: f64,
    pub beta: f64,
    /// Block alignment gradients into the attributes-guided maps.
    pub teacher_stop_gradient: bool,
    pub normalization: Normalization,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            loss_type: AlignmentLoss::SoftMargin,
            alpha: 1.0,
            beta: 0.1,
            teacher_stop_gradient: true,
            normalization: Normalization::Separate,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("alignment.{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `M / ‖M‖₂` over all elements; zeros when the norm is below 1e-12.
pub fn normalize_map(m: &Tensor) -> Tensor {
    let n = math::sqrt(m.data().iter().map(|v| v * v).sum());
    if n < NORM_FLOOR {
        Tensor::zeros(m.shape())
    } else {
        m.map(|v| v / n)
    }
}

/// `Σ_j log(1 + exp(−a_j·b_j))` over all elements of two normalized maps.
pub fn soft_margin_alignment(g: &mut Graph, m_ag: Var, m_sg: Var) -> Result<Var> {
    let p = g.mul(m_ag, m_sg)?;
    let np = g.neg(p);
    let sp = g.softplus(np);
    Ok(g.sum(sp))
}

/// Mean-reduced L1, MSE or smooth-L1 between two maps.
pub fn alt_alignment(g: &mut Graph, kind: AlignmentLoss, m_ag: Var, m_sg: Var) -> Result<Var> {
    let d = g.sub(m_ag, m_sg)?;
    let e = match kind {
        AlignmentLoss::L1 => g.abs(d),
        AlignmentLoss::Mse => g.mul(d, d)?,
        AlignmentLoss::SmoothL1 => g.smooth_l1(d),
        AlignmentLoss::SoftMargin => {
            return Err(Error::config("alt_alignment: soft-margin is not an alternative loss"))
        }
    };
    Ok(g.mean(e))
}

/// Loss of one family summed over the `rows` samples stacked in the leading
/// axis of two normalized map batches.
fn family_loss(g: &mut Graph, kind: AlignmentLoss, a: Var, b: Var, rows: usize) -> Result<Var> {
    match kind {
        AlignmentLoss::SoftMargin => soft_margin_alignment(g, a, b),
        // A per-sample mean summed over samples is the batch mean times rows.
        _ => {
            let m = alt_alignment(g, kind, a, b)?;
            Ok(g.scale(m, rows as f64))
        }
    }
}

/// Channel and spatial alignment losses summed over supports.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentTerms {
    pub l_cas: Var,
    pub l_sas: Var,
}

fn teacher(g: &mut Graph, v: Var, cfg: &AlignmentConfig) -> Var {
    if cfg.teacher_stop_gradient {
        g.detach(v)
    } else {
        v
    }
}

/// Normalized (channel, spatial) maps of both branches, each `S×…`.
struct NormalizedPair {
    c: Option<(Var, Var)>,
    s: Option<(Var, Var)>,
}

fn normalized_pair(g: &mut Graph, res: &AgamResult, cfg: &AlignmentConfig, rows: usize) -> Result<NormalizedPair> {
    let (ag, sg) = match (res.ag, res.sg) {
        (Some(a), Some(s)) => (a, s),
        _ => return Err(Error::contract("alignment needs both branch outputs for every support")),
    };
    let pairs = [(ag.m_c, sg.m_c), (ag.m_s, sg.m_s)];
    let mut out = [None, None];
    match cfg.normalization {
        Normalization::Separate => {
            for (slot, pair) in out.iter_mut().zip(pairs) {
                if let (Some(a), Some(s)) = pair {
                    let a = teacher(g, a, cfg);
                    let na = g.normalize_rows(a, rows)?;
                    let ns = g.normalize_rows(s, rows)?;
                    *slot = Some((na, ns));
                }
            }
        }
        Normalization::Joint => {
            let present: Vec<(usize, Var, Var)> = pairs
                .iter()
                .enumerate()
                .filter_map(|(i, p)| match *p {
                    (Some(a), Some(s)) => Some((i, a, s)),
                    _ => None,
                })
                .collect();
            if present.is_empty() {
                return Ok(NormalizedPair { c: None, s: None });
            }
            let mut widths = Vec::new();
            let mut cat: Option<(Var, Var)> = None;
            for &(_, a, s) in &present {
                let a = teacher(g, a, cfg);
                let fa = g.reshape(a, &[rows, g.value(a).len() / rows.max(1)])?;
                let fs = g.reshape(s, &[rows, g.value(s).len() / rows.max(1)])?;
                widths.push(g.shape(fa)[1]);
                cat = Some(match cat {
                    None => (fa, fs),
                    Some((ca, cs)) => (g.concat(ca, fa, 1)?, g.concat(cs, fs, 1)?),
                });
            }
            let (ca, cs) = cat.expect("at least one family");
            let na = g.normalize_rows(ca, rows)?;
            let ns = g.normalize_rows(cs, rows)?;
            let mut start = 0;
            for (&(i, _, _), &w) in present.iter().zip(&widths) {
                let a = g.slice_cols(na, start, w)?;
                let s = g.slice_cols(ns, start, w)?;
                out[i] = Some((a, s));
                start += w;
            }
        }
    }
    Ok(NormalizedPair {
        c: out[0],
        s: out[1],
    })
}

/// `(L_cas, L_sas)`: per-support alignment terms summed over supports. A
/// family whose attention is disabled contributes a constant 0.
pub fn episode_alignment_losses(
    g: &mut Graph,
    res: Option<&AgamResult>,
    cfg: &AlignmentConfig,
    n_support: usize,
) -> Result<AlignmentTerms> {
    let zero = |g: &mut Graph| g.constant(Tensor::scalar(0.0));
    let res = match res {
        Some(r) if n_support > 0 => r,
        _ => {
            let z = zero(g);
            return Ok(AlignmentTerms { l_cas: z, l_sas: z });
        }
    };
    let np = normalized_pair(g, res, cfg, n_support)?;
    let fam = |g: &mut Graph, p: Option<(Var, Var)>| -> Result<Var> {
        match p {
            Some((a, s)) => family_loss(g, cfg.loss_type, a, s, n_support),
            None => Ok(zero(g)),
        }
    };
    let l_cas = fam(g, np.c)?;
    let l_sas = fam(g, np.s)?;
    Ok(AlignmentTerms { l_cas, l_sas })
}

/// `L_mbc + α·L_cas + β·L_sas`; a term with zero weight is left out of the
/// graph entirely.
pub fn total_loss(g: &mut Graph, l_mbc: Var, terms: &AlignmentTerms, cfg: &AlignmentConfig) -> Result<Var> {
    let mut l = l_mbc;
    for (w, t) in [(cfg.alpha, terms.l_cas), (cfg.beta, terms.l_sas)] {
        if w != 0.0 {
            let s = g.scale(t, w);
            l = g.add(l, s)?;
        }
    }
    Ok(l)
}

/// Mean `|M̃_ag − M̃_sg|` per map family, and their equal-weight average.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttentionDifference {
    pub channel: Option<f64>,
    pub spatial: Option<f64>,
}

impl AttentionDifference {
    /// Average over the families present; 0 when neither is.
    pub fn mean(&self) -> f64 {
        match (self.channel, self.spatial) {
            (Some(c), Some(s)) => 0.5 * (c + s),
            (Some(v), None) | (None, Some(v)) => v,
            (None, None) => 0.0,
        }
    }
}

/// Branch maps of one support sample (any shape; flattened).
#[derive(Clone, Debug, PartialEq)]
pub struct MapPair {
    pub m_ag: Tensor,
    pub m_sg: Tensor,
}

/// Attention difference over samples: each map is L2-normalized separately,
/// then `|M̃_ag − M̃_sg|` is averaged over samples and elements.
pub fn attention_difference(channel: &[MapPair], spatial: &[MapPair]) -> Result<AttentionDifference> {
    let fam = |pairs: &[MapPair]| -> Result<Option<f64>> {
        if pairs.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for p in pairs {
            if p.m_ag.len() != p.m_sg.len() {
                return Err(Error::shape(format!(
                    "attention_difference: map sizes {} and {}",
                    p.m_ag.len(),
                    p.m_sg.len()
                )));
            }
            let (a, s) = (normalize_map(&p.m_ag), normalize_map(&p.m_sg));
            total += a.data().iter().zip(s.data()).map(|(x, y)| (x - y).abs()).sum::<f64>();
            count += a.len();
        }
        Ok(Some(if count == 0 { 0.0 } else { total / count as f64 }))
    };
    Ok(AttentionDifference {
        channel: fam(channel)?,
        spatial: fam(spatial)?,
    })
}

/// Splits batched `S×…` map values of both branches into per-sample pairs.
pub fn split_pairs(ag: &Tensor, sg: &Tensor) -> Result<Vec<MapPair>> {
    if ag.shape() != sg.shape() || ag.rank() == 0 {
        return Err(Error::shape(format!(
            "branch maps {:?} and {:?} cannot be paired",
            ag.shape(),
            sg.shape()
        )));
    }
    let n = ag.shape()[0];
    Ok((0..n)
        .map(|i| MapPair {
            m_ag: ag.slice_outer(i, i + 1),
            m_sg: sg.slice_outer(i, i + 1),
        })
        .collect())
}
