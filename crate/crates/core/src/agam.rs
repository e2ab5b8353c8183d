//! The attributes-guided attention module.
//!
//! Two parallel branches refine a backbone feature map `F` with a channel
//! gate `M_c` followed by a spatial gate `M_s` (or the reverse order):
//!
//! * the *attributes-guided* branch sees `[F; A]`, where `A` is the
//!   attribute vector repeated over every spatial position;
//! * the *self-guided* branch sees `F` alone and is the only path available
//!   to samples without attributes.
//!
//! The branches never share parameters.

use alloc::format;
use alloc::string::String;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PoolMode, Var};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "ag")]
    AttributesGuided,
    #[serde(rename = "sg")]
    SelfGuided,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::AttributesGuided => "ag",
            Branch::SelfGuided => "sg",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionOrder {
    /// Channel attention first, then spatial attention.
    #[default]
    #[serde(rename = "CA-SA")]
    ChannelFirst,
    #[serde(rename = "SA-CA")]
    SpatialFirst,
}

/// Architecture of one AGAM instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgamConfig {
    /// Feature channels `C` of the map being refined.
    pub channels: usize,
    /// Attribute dimension `D`.
    pub attribute_dim: usize,
    /// Reduction ratio `r` of the channel-attention generator.
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub order: AttentionOrder,
    pub use_avgpool: bool,
    pub use_maxpool: bool,
    pub channel_attention: bool,
    pub spatial_attention: bool,
}

impl AgamConfig {
    pub fn new(channels: usize, attribute_dim: usize) -> Self {
        AgamConfig {
            channels,
            attribute_dim,
            reduction: 8,
            spatial_kernel: 7,
            order: AttentionOrder::ChannelFirst,
            use_avgpool: true,
            use_maxpool: true,
            channel_attention: true,
            spatial_attention: true,
        }
    }

    /// Whether any attention runs at all.
    pub fn enabled(&self) -> bool {
        self.channel_attention || self.spatial_attention
    }

    /// Channels entering the attention generators of a branch.
    pub fn input_channels(&self, branch: Branch) -> usize {
        match branch {
            Branch::AttributesGuided => self.channels + self.attribute_dim,
            Branch::SelfGuided => self.channels,
        }
    }

    /// Hidden width `⌊C_in / r⌋` of a branch's channel generator.
    pub fn hidden(&self, branch: Branch) -> usize {
        self.input_channels(branch) / self.reduction.max(1)
    }

    fn pool_modes(&self) -> impl Iterator<Item = PoolMode> {
        // Spatial gates stack [avg; max], so avg comes first.
        [
            (self.use_avgpool, PoolMode::Avg),
            (self.use_maxpool, PoolMode::Max),
        ]
        .into_iter()
        .filter_map(|(on, m)| on.then_some(m))
    }

    fn pool_count(&self) -> usize {
        self.use_avgpool as usize + self.use_maxpool as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("agam: zero feature channels"));
        }
        if self.reduction == 0 {
            return Err(Error::config("agam: reduction ratio must be ≥ 1"));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::config("agam: spatial kernel must be odd"));
        }
        if self.enabled() && self.pool_count() == 0 {
            return Err(Error::config("agam: at least one pooling must stay enabled"));
        }
        for b in [Branch::AttributesGuided, Branch::SelfGuided] {
            if self.channel_attention && self.hidden(b) == 0 {
                return Err(Error::config(format!(
                    "agam: reduction ratio {} leaves no hidden units for {} input channels",
                    self.reduction,
                    self.input_channels(b)
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of one branch: the channel generator `W_0`, `W_1` (as 1×1
/// convolutions) and the spatial convolution `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub branch: Branch,
    pub cw0_w: Tensor,
    pub cw0_b: Tensor,
    pub cw1_w: Tensor,
    pub cw1_b: Tensor,
    pub sconv_w: Tensor,
    pub sconv_b: Tensor,
}

const FIELDS: [&str; 6] = ["cw0.w", "cw0.b", "cw1.w", "cw1.b", "sconv.w", "sconv.b"];

pub fn param_prefix(branch: Branch) -> String {
    format!("agam.{}.", branch.tag())
}

impl BranchParams {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &AgamConfig, branch: Branch, rng: &mut R) -> Self {
        let c_in = cfg.input_channels(branch);
        let hidden = cfg.hidden(branch);
        let c = cfg.channels;
        let k = cfg.spatial_kernel;
        let sp_in = cfg.pool_count();
        BranchParams {
            branch,
            cw0_w: fan_in_uniform(&[hidden, c_in, 1, 1], c_in, rng),
            cw0_b: Tensor::zeros(&[hidden]),
            cw1_w: fan_in_uniform(&[c, hidden, 1, 1], hidden, rng),
            cw1_b: Tensor::zeros(&[c]),
            sconv_w: fan_in_uniform(&[1, sp_in, k, k], sp_in * k * k, rng),
            sconv_b: Tensor::zeros(&[1]),
        }
    }

    /// All-zero weights and biases (both gates then output 0.5 everywhere).
    pub fn zeros(cfg: &AgamConfig, branch: Branch) -> Self {
        let c_in = cfg.input_channels(branch);
        let hidden = cfg.hidden(branch);
        let k = cfg.spatial_kernel;
        BranchParams {
            branch,
            cw0_w: Tensor::zeros(&[hidden, c_in, 1, 1]),
            cw0_b: Tensor::zeros(&[hidden]),
            cw1_w: Tensor::zeros(&[cfg.channels, hidden, 1, 1]),
            cw1_b: Tensor::zeros(&[cfg.channels]),
            sconv_w: Tensor::zeros(&[1, cfg.pool_count(), k, k]),
            sconv_b: Tensor::zeros(&[1]),
        }
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.cw0_w,
            &self.cw0_b,
            &self.cw1_w,
            &self.cw1_b,
            &self.sconv_w,
            &self.sconv_b,
        ]
    }

    pub fn insert_into(&self, store: &mut ParamStore) {
        let prefix = param_prefix(self.branch);
        for (field, t) in FIELDS.iter().zip(self.tensors()) {
            store.insert(format!("{prefix}{field}"), t.clone());
        }
    }

    pub fn from_store(store: &ParamStore, branch: Branch) -> Result<Self> {
        let p = param_prefix(branch);
        let get = |f: &str| store.get(&format!("{p}{f}")).cloned();
        Ok(BranchParams {
            branch,
            cw0_w: get("cw0.w")?,
            cw0_b: get("cw0.b")?,
            cw1_w: get("cw1.w")?,
            cw1_b: get("cw1.b")?,
            sconv_w: get("sconv.w")?,
            sconv_b: get("sconv.b")?,
        })
    }
}

/// Graph handles of one branch's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub branch: Branch,
    pub cw0_w: Var,
    pub cw0_b: Var,
    pub cw1_w: Var,
    pub cw1_b: Var,
    pub sconv_w: Var,
    pub sconv_b: Var,
}

impl BranchVars {
    pub fn from_bound(bound: &Bound, branch: Branch) -> Result<Self> {
        let p = param_prefix(branch);
        let v = |f: &str| bound.var(&format!("{p}{f}"));
        Ok(BranchVars {
            branch,
            cw0_w: v("cw0.w")?,
            cw0_b: v("cw0.b")?,
            cw1_w: v("cw1.w")?,
            cw1_b: v("cw1.b")?,
            sconv_w: v("sconv.w")?,
            sconv_b: v("sconv.b")?,
        })
    }

    /// Binds a standalone [`BranchParams`] as gradient-carrying leaves.
    pub fn bind(g: &mut Graph, p: &BranchParams) -> Self {
        BranchVars {
            branch: p.branch,
            cw0_w: g.param(p.cw0_w.clone()),
            cw0_b: g.param(p.cw0_b.clone()),
            cw1_w: g.param(p.cw1_w.clone()),
            cw1_b: g.param(p.cw1_b.clone()),
            sconv_w: g.param(p.sconv_w.clone()),
            sconv_b: g.param(p.sconv_b.clone()),
        }
    }
}

/// Repeats the attribute vector `D` (or batch `N×D`) over `H×W`.
pub fn broadcast_attributes(g: &mut Graph, a: Var, h: usize, w: usize) -> Result<Var> {
    g.broadcast_spatial(a, h, w)
}

/// `M_c = σ(W_1 ReLU(W_0 MaxPool(x)) + W_1 ReLU(W_0 AvgPool(x)))`, one
/// `C×1×1` gate per sample.
pub fn channel_attention(g: &mut Graph, bv: &BranchVars, cfg: &AgamConfig, f_inp: Var) -> Result<Var> {
    let c_in = channel_extent(g.shape(f_inp))?;
    let expected = g.shape(bv.cw0_w)[1];
    if c_in != expected {
        return Err(Error::shape(format!(
            "channel attention ({}) expects {expected} input channels, got {c_in}",
            bv.branch.tag()
        )));
    }
    let mut acc: Option<Var> = None;
    // Max term first, matching the order of the two summands.
    for mode in [PoolMode::Max, PoolMode::Avg] {
        let on = match mode {
            PoolMode::Max => cfg.use_maxpool,
            PoolMode::Avg => cfg.use_avgpool,
        };
        if !on {
            continue;
        }
        let pooled = g.global_pool(f_inp, mode)?;
        let h = g.conv2d(pooled, bv.cw0_w, bv.cw0_b, 0)?;
        let h = g.relu(h);
        let o = g.conv2d(h, bv.cw1_w, bv.cw1_b, 0)?;
        acc = Some(match acc {
            None => o,
            Some(prev) => g.add(prev, o)?,
        });
    }
    let logits = acc.ok_or_else(|| Error::config("channel attention with no pooling enabled"))?;
    Ok(g.sigmoid(logits))
}

/// `M_s = σ(f([AvgPool_ch(x); MaxPool_ch(x)]))`, one `1×H×W` gate per
/// sample; the convolution pads so the spatial extent is preserved.
pub fn spatial_attention(g: &mut Graph, bv: &BranchVars, cfg: &AgamConfig, f_inp: Var) -> Result<Var> {
    let k = g.shape(bv.sconv_w)[2];
    let mut stacked: Option<Var> = None;
    for mode in cfg.pool_modes() {
        let p = g.channel_pool(f_inp, mode)?;
        stacked = Some(match stacked {
            None => p,
            Some(prev) => g.concat_channels(prev, p)?,
        });
    }
    let stacked = stacked.ok_or_else(|| Error::config("spatial attention with no pooling enabled"))?;
    let logits = g.conv2d(stacked, bv.sconv_w, bv.sconv_b, k / 2)?;
    Ok(g.sigmoid(logits))
}

fn channel_extent(shape: &[usize]) -> Result<usize> {
    match *shape {
        [c, _, _] | [_, c, _, _] => Ok(c),
        _ => Err(Error::shape(format!("expected C×H×W or N×C×H×W, got {shape:?}"))),
    }
}

fn spatial_extent(shape: &[usize]) -> (usize, usize) {
    let r = shape.len();
    (shape[r - 2], shape[r - 1])
}

/// Graph outputs of one branch for a sample or batch.
#[derive(Clone, Copy, Debug)]
pub struct AgamOutput {
    pub branch: Branch,
    /// `F_s_out`, same shape as the input features.
    pub refined: Var,
    /// `C×1×1` gate, absent when channel attention is disabled.
    pub m_c: Option<Var>,
    /// `1×H×W` gate, absent when spatial attention is disabled.
    pub m_s: Option<Var>,
}

/// Runs a single branch. `attrs` must be present exactly for the
/// attributes-guided branch.
pub fn branch_forward(
    g: &mut Graph,
    bv: &BranchVars,
    cfg: &AgamConfig,
    f: Var,
    attrs: Option<Var>,
) -> Result<AgamOutput> {
    let (h, w) = spatial_extent(g.shape(f));
    let a_map = match (bv.branch, attrs) {
        (Branch::AttributesGuided, Some(a)) => Some(broadcast_attributes(g, a, h, w)?),
        (Branch::AttributesGuided, None) => {
            return Err(Error::contract("attributes-guided branch needs attributes"))
        }
        (Branch::SelfGuided, _) => None,
    };
    let with_attrs = |g: &mut Graph, x: Var| -> Result<Var> {
        match a_map {
            Some(a) => g.concat_channels(x, a),
            None => Ok(x),
        }
    };
    let mut m_c = None;
    let mut m_s = None;
    let refined = match cfg.order {
        AttentionOrder::ChannelFirst => {
            let mut cur = f;
            if cfg.channel_attention {
                let inp = with_attrs(g, f)?;
                let m = channel_attention(g, bv, cfg, inp)?;
                cur = g.broadcast_mul(f, m)?;
                m_c = Some(m);
            }
            if cfg.spatial_attention {
                let inp = with_attrs(g, cur)?;
                let m = spatial_attention(g, bv, cfg, inp)?;
                cur = g.broadcast_mul(cur, m)?;
                m_s = Some(m);
            }
            cur
        }
        AttentionOrder::SpatialFirst => {
            let mut cur = f;
            if cfg.spatial_attention {
                let inp = with_attrs(g, f)?;
                let m = spatial_attention(g, bv, cfg, inp)?;
                cur = g.broadcast_mul(f, m)?;
                m_s = Some(m);
            }
            if cfg.channel_attention {
                let inp = with_attrs(g, cur)?;
                let m = channel_attention(g, bv, cfg, inp)?;
                cur = g.broadcast_mul(cur, m)?;
                m_c = Some(m);
            }
            cur
        }
    };
    Ok(AgamOutput {
        branch: bv.branch,
        refined,
        m_c,
        m_s,
    })
}

/// Outputs of [`agam_forward`]: one or both branches.
#[derive(Clone, Copy, Debug)]
pub struct AgamResult {
    pub ag: Option<AgamOutput>,
    pub sg: Option<AgamOutput>,
}

impl AgamResult {
    /// The output that carries the embedding: attributes-guided when it ran.
    pub fn primary(&self) -> AgamOutput {
        self.ag.or(self.sg).expect("agam_forward yields at least one branch")
    }

    pub fn count(&self) -> usize {
        self.ag.is_some() as usize + self.sg.is_some() as usize
    }
}

/// Routes features through the branch selected by attribute availability.
///
/// Without attributes only the self-guided branch runs. With attributes the
/// attributes-guided branch runs, and with `dual` set the self-guided branch
/// also runs on the same features so the pair can be aligned.
pub fn agam_forward(
    g: &mut Graph,
    ag: &BranchVars,
    sg: &BranchVars,
    cfg: &AgamConfig,
    f: Var,
    attrs: Option<Var>,
    dual: bool,
) -> Result<AgamResult> {
    match attrs {
        None => Ok(AgamResult {
            ag: None,
            sg: Some(branch_forward(g, sg, cfg, f, None)?),
        }),
        Some(a) => {
            let d = *g.shape(a).last().unwrap_or(&0);
            if d != cfg.attribute_dim {
                return Err(Error::shape(format!(
                    "attribute vector has {d} entries, module expects {}",
                    cfg.attribute_dim
                )));
            }
            let ag_out = branch_forward(g, ag, cfg, f, Some(a))?;
            let sg_out = if dual {
                Some(branch_forward(g, sg, cfg, f, None)?)
            } else {
                None
            };
            Ok(AgamResult {
                ag: Some(ag_out),
                sg: sg_out,
            })
        }
    }
}
