//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes a new
//! node whose parents have strictly smaller indices, so the arena order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Spatial operations accept `C×H×W` samples or `N×C×H×W` batches; a rank-3
//! input is treated as a batch of one and produces a rank-3 output.

mod kernels;

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub(crate) use kernels::gemm;
use kernels::{col2im, dot_lanes, im2col, sum_lanes, ConvGeom};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Backward rule of a user-supplied operation: given the input values, the
/// output value and the output gradient, return one gradient per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

/// Per-channel statistics of a training-mode batch-norm call: the batch mean
/// and the unbiased batch variance, for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    GlobalPool {
        x: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    ChannelPool {
        x: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastMul {
        a: Var,
        b: Var,
    },
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Abs(Var),
    SmoothL1(Var),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_chunk: usize,
        b_chunk: usize,
    },
    LogSoftmax(Var),
    Sum(Var),
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    BroadcastSpatial {
        x: Var,
        hw: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SqDist(Var, Var),
    Cosine {
        a: Var,
        b: Var,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
    },
    Matmul(Var, Var),
    Nll {
        logp: Var,
        labels: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        rows: usize,
        norms: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Detach,
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Norms below this are treated as zero by normalization and cosine ops.
pub const NORM_FLOOR: f64 = 1e-12;

/// Computation graph with gradient storage.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn nchw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!(
            "{what}: expected C×H×W or N×C×H×W, got {shape:?}"
        ))),
    }
}

fn with_nchw(like: &[usize], n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if like.len() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

fn matrix(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(format!("{what}: expected a matrix, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Like [`Graph::grad`] but zeros for unreached nodes.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    // ---------------------------------------------------------------------
    // Spatial operations
    // ---------------------------------------------------------------------

    /// Zero-padded stride-1 cross-correlation with a square odd kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (n, c_in, h, wd) = nchw(self.shape(x), "conv2d input")?;
        let (c_out, wc_in, k) = match *self.shape(w) {
            [o, i, kh, kw] if kh == kw => (o, i, kh),
            ref s => {
                return Err(Error::shape(format!(
                    "conv2d: weight must be C_out×C_in×k×k, got {s:?}"
                )))
            }
        };
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::shape(format!("conv2d: kernel size {k} is not odd")));
        }
        if self.shape(b) != [c_out] {
            return Err(Error::shape(format!(
                "conv2d: bias must have shape [{c_out}], got {:?}",
                self.shape(b)
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d: {h}×{wd} input with pad {pad} is smaller than kernel {k}"
            )));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            pad,
            h_out: h + 2 * pad - k + 1,
            w_out: wd + 2 * pad - k + 1,
        };
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        // All samples share one column matrix so that a single product
        // covers the batch: cols is rows × (n·ncol).
        let ld = n * ncol;
        let mut cols = vec![0.0; rows * ld];
        let mut out = vec![0.0; n * c_out * ncol];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let sample = c_in * h * wd;
            for s in 0..n {
                im2col(&geom, &xv[s * sample..(s + 1) * sample], &mut cols[s * ncol..], ld);
            }
            let mut prod = vec![0.0; c_out * ld];
            gemm(c_out, rows, ld, wv, (rows, 1), &cols, (ld, 1), 0.0, &mut prod, (ld, 1));
            for s in 0..n {
                for co in 0..c_out {
                    let src = &prod[co * ld + s * ncol..co * ld + (s + 1) * ncol];
                    let dst = &mut out[(s * c_out + co) * ncol..(s * c_out + co + 1) * ncol];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = v + bv[co];
                    }
                }
            }
        }
        if !self.requires_grad(w) {
            cols = Vec::new();
        }
        let shape = with_nchw(self.shape(x), n, c_out, geom.h_out, geom.w_out);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Per-channel max or mean over the spatial extent: `C×H×W → C×1×1`.
    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "global_pool")?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("global_pool: empty spatial extent"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::new();
        for plane in xv.chunks(hw) {
            match mode {
                PoolMode::Avg => out.push(plane.iter().sum::<f64>() / hw as f64),
                PoolMode::Max => {
                    let (i, v) = first_argmax(plane);
                    argmax.push(i);
                    out.push(v);
                }
            }
        }
        let shape = with_nchw(self.shape(x), n, c, 1, 1);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::GlobalPool { x, mode, argmax }, rg))
    }

    /// Per-position max or mean across channels: `C×H×W → 1×H×W`.
    pub fn channel_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "channel_pool")?;
        if c == 0 {
            return Err(Error::shape("channel_pool: zero channels"));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0usize; n * hw];
        }
        for s in 0..n {
            let sample = &xv[s * c * hw..(s + 1) * c * hw];
            for p in 0..hw {
                match mode {
                    PoolMode::Avg => {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += sample[ch * hw + p];
                        }
                        out[s * hw + p] = acc / c as f64;
                    }
                    PoolMode::Max => {
                        let mut best = 0;
                        let mut bv = sample[p];
                        for ch in 1..c {
                            let v = sample[ch * hw + p];
                            if v > bv {
                                bv = v;
                                best = ch;
                            }
                        }
                        out[s * hw + p] = bv;
                        argmax[s * hw + p] = best;
                    }
                }
            }
        }
        let shape = with_nchw(self.shape(x), n, 1, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ChannelPool { x, mode, argmax }, rg))
    }

    /// 2×2 stride-2 max pooling (odd trailing rows/columns are dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "max_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape(format!("max_pool2: cannot pool a {h}×{w} map")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        for plane_idx in 0..n * c {
            let base = plane_idx * h * w;
            for i in 0..ho {
                let r0 = base + 2 * i * w;
                let r1 = r0 + w;
                let top = &xv[r0..r0 + 2 * wo];
                let bot = &xv[r1..r1 + 2 * wo];
                let o = (plane_idx * ho + i) * wo;
                let (od, ad) = (&mut out[o..o + wo], &mut argmax[o..o + wo]);
                for j in 0..wo {
                    // Row-major candidate order; the first maximum wins.
                    let mut best = (top[2 * j], r0 + 2 * j);
                    for (v, idx) in [(top[2 * j + 1], r0 + 2 * j + 1), (bot[2 * j], r1 + 2 * j), (bot[2 * j + 1], r1 + 2 * j + 1)] {
                        if v > best.0 {
                            best = (v, idx);
                        }
                    }
                    od[j] = best.0;
                    ad[j] = best.1;
                }
            }
        }
        let shape = with_nchw(self.shape(x), n, c, ho, wo);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Concatenation along the channel axis (axis 0 of `C×H×W`, axis 1 of
    /// `N×C×H×W`, axis 1 of `N×D`).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let axis = match self.shape(a).len() {
            3 => 0,
            2 | 4 => 1,
            r => return Err(Error::shape(format!("concat_channels: unsupported rank {r}"))),
        };
        self.concat(a, b, axis)
    }

    /// Concatenation along an arbitrary axis.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape(format!(
                "concat: {sa:?} and {sb:?} differ off axis {axis}"
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (a_chunk, b_chunk) = (sa[axis] * inner, sb[axis] * inner);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * a_chunk..(o + 1) * a_chunk]);
            out.extend_from_slice(&bv[o * b_chunk..(o + 1) * b_chunk]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                a,
                b,
                outer,
                a_chunk,
                b_chunk,
            },
            rg,
        ))
    }

    /// Repeats a `D` vector (or `N×D` batch) over an `H×W` grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = match *self.shape(x) {
            [d] => vec![d, h, w],
            [n, d] => vec![n, d, h, w],
            ref s => {
                return Err(Error::shape(format!(
                    "broadcast_spatial: expected D or N×D, got {s:?}"
                )))
            }
        };
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| core::iter::repeat(v).take(hw))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::BroadcastSpatial { x, hw }, rg))
    }

    /// Batch normalization over `N×C×H×W` (per channel).
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, h, w) = nchw(self.shape(x), "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm: affine parameters must have shape [{c}]"
            )));
        }
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch_norm: running statistics length"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if m < 2 {
                    return Err(Error::shape(
                        "batch_norm: batch statistics need at least two values per channel",
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (pi, plane) in xv.chunks_exact(hw).enumerate() {
                    mean[pi % c] += sum_lanes(plane);
                }
                for v in &mut mean {
                    *v /= m as f64;
                }
                let mut centered = vec![0.0; hw];
                for (pi, plane) in xv.chunks_exact(hw).enumerate() {
                    let mu = mean[pi % c];
                    for (d, v) in centered.iter_mut().zip(plane) {
                        *d = v - mu;
                    }
                    var[pi % c] += dot_lanes(&centered, &centered);
                }
                let unbiased: Vec<f64> = var.iter().map(|v| v / (m - 1) as f64).collect();
                for v in &mut var {
                    *v /= m as f64;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xv.len());
        for (pi, plane) in xv.chunks_exact(hw).enumerate() {
            let ch = pi % c;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
            out.extend(plane.iter().map(|v| ga * ((v - mu) * is) + be));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let batch_stats = stats.is_some();
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("binary shape");
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a ⊗ b` where `b` has the same rank and, on every axis, either `a`'s
    /// extent or 1.
    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = BroadcastMap::new(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[map.index(i)])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::BroadcastMul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), math::sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), math::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), math::ln)
    }

    /// `ln(1 + e^x)` elementwise.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), math::softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Huber-style smooth L1 with unit threshold, elementwise.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        self.unary(a, Op::SmoothL1(a), |d| {
            if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            }
        })
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::Detach, false)
    }

    // ---------------------------------------------------------------------
    // Reductions, reshapes, indexing
    // ---------------------------------------------------------------------

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Flattens everything but the leading axis.
    pub fn flatten_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let rows = *s.first().ok_or_else(|| Error::shape("flatten of a scalar"))?;
        let inner: usize = s[1..].iter().product();
        self.reshape(a, &[rows, inner])
    }

    /// Selects entries along the leading axis (repeats allowed).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let rows = *s.first().ok_or_else(|| Error::shape("gather of a scalar"))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("gather: index {bad} out of {rows}")));
        }
        let inner: usize = s[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&xv[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `[start, start + len)` of an `R×W` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, w) = matrix(self.shape(x), "slice_cols")?;
        if start + len > w {
            return Err(Error::shape(format!(
                "slice_cols: [{start}, {}) exceeds width {w}",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&xv[row * w + start..row * w + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = *s.last().ok_or_else(|| Error::shape("log_softmax of a scalar"))?;
        if n == 0 {
            return Err(Error::shape("log_softmax over an empty axis"));
        }
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            log_softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(s, out)?, Op::LogSoftmax(a), rg))
    }

    /// Matrix product of `M×K` and `K×N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix(self.shape(a), "matmul lhs")?;
        let (k2, n) = matrix(self.shape(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: inner extents {k} and {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::Matmul(a, b), rg))
    }

    /// Squared Euclidean distances between the rows of `Q×E` and `P×E`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (q, e) = matrix(self.shape(a), "sq_dist lhs")?;
        let (p, e2) = matrix(self.shape(b), "sq_dist rhs")?;
        if e != e2 {
            return Err(Error::shape(format!("sq_dist: widths {e} and {e2}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(q * p);
        for i in 0..q {
            let x = &av[i * e..(i + 1) * e];
            for j in 0..p {
                let y = &bv[j * e..(j + 1) * e];
                out.push(x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum());
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([q, p], out)?, Op::SqDist(a, b), rg))
    }

    /// Cosine similarities between the rows of `Q×E` and `S×E`; a pair with
    /// a zero-norm row has similarity 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (q, e) = matrix(self.shape(a), "cosine lhs")?;
        let (s, e2) = matrix(self.shape(b), "cosine rhs")?;
        if e != e2 {
            return Err(Error::shape(format!("cosine: widths {e} and {e2}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let norm = |r: &[f64]| math::sqrt(r.iter().map(|v| v * v).sum());
        let norms_a: Vec<f64> = av.chunks(e.max(1)).take(q).map(norm).collect();
        let norms_b: Vec<f64> = bv.chunks(e.max(1)).take(s).map(norm).collect();
        let mut out = Vec::with_capacity(q * s);
        for i in 0..q {
            for j in 0..s {
                let (na, nb) = (norms_a[i], norms_b[j]);
                if na < NORM_FLOOR || nb < NORM_FLOOR {
                    out.push(0.0);
                    continue;
                }
                let dot: f64 = av[i * e..(i + 1) * e]
                    .iter()
                    .zip(&bv[j * e..(j + 1) * e])
                    .map(|(x, y)| x * y)
                    .sum();
                out.push(dot / (na * nb));
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new([q, s], out)?,
            Op::Cosine {
                a,
                b,
                norms_a,
                norms_b,
            },
            rg,
        ))
    }

    /// `−Σ_i logp[i, labels[i]]` over a `Q×N` matrix of log-probabilities.
    pub fn nll_sum(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let (q, n) = matrix(self.shape(logp), "nll")?;
        if labels.len() != q {
            return Err(Error::shape(format!("nll: {q} rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::contract(format!("nll: label {bad} outside 0..{n}")));
        }
        let lv = self.value(logp).data();
        let s: f64 = labels.iter().enumerate().map(|(i, &y)| -lv[i * n + y]).sum();
        let rg = self.rg(&[logp]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Nll {
                logp,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Splits `x` into `rows` equal leading chunks and L2-normalizes each;
    /// chunks with norm below [`NORM_FLOOR`] become zeros.
    pub fn normalize_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let len = self.value(x).len();
        if rows == 0 || len % rows != 0 {
            return Err(Error::shape(format!(
                "normalize_rows: {len} values do not split into {rows} rows"
            )));
        }
        let width = len / rows;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for row in out.chunks_mut(width.max(1)).take(rows) {
            let n = math::sqrt(row.iter().map(|v| v * v).sum());
            norms.push(n);
            if n < NORM_FLOOR {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeRows { x, rows, norms }, rg))
    }

    /// An operation with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Reverse sweep from a scalar root. Gradients from earlier sweeps are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward: root must be scalar, has shape {:?}",
                self.shape(root)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        let root_shape = self.shape(root).to_vec();
        self.grads[root.0] = Some(Tensor::full(&root_shape, 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            for (v, t) in self.contributions(i, &g) {
                self.accumulate(v, t);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn lazy(&self, out: &mut Vec<(Var, Tensor)>, v: Var, f: impl FnOnce(&Graph) -> Tensor) {
        if self.nodes[v.0].requires_grad {
            out.push((v, f(self)));
        }
    }

    fn contributions(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let mut out = Vec::new();
        let gd = g.data();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let n = match node.value.rank() {
                    3 => 1,
                    _ => node.value.shape()[0],
                };
                let c_out = self.shape(w)[0];
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                let ld = n * ncol;
                // Output gradient regrouped as c_out × (n·ncol).
                let mut gt = vec![0.0; c_out * ld];
                let mut db = vec![0.0; c_out];
                for s in 0..n {
                    for co in 0..c_out {
                        let off = (s * c_out + co) * ncol;
                        let src = &gd[off..off + ncol];
                        db[co] += sum_lanes(src);
                        gt[co * ld + s * ncol..co * ld + (s + 1) * ncol].copy_from_slice(src);
                    }
                }
                let dw = if self.requires_grad(w) {
                    let mut dw = vec![0.0; c_out * rows];
                    gemm(c_out, ld, rows, &gt, (ld, 1), cols, (1, ld), 0.0, &mut dw, (rows, 1));
                    Some(dw)
                } else {
                    None
                };
                let dx = if self.requires_grad(x) {
                    let wv = self.value(w).data();
                    let sample = geom.c_in * geom.h * geom.w;
                    let mut dx = vec![0.0; n * sample];
                    let mut dcol = vec![0.0; rows * ld];
                    gemm(rows, c_out, ld, wv, (1, rows), &gt, (ld, 1), 0.0, &mut dcol, (ld, 1));
                    for s in 0..n {
                        col2im(&geom, &dcol[s * ncol..], ld, &mut dx[s * sample..(s + 1) * sample]);
                    }
                    Some(dx)
                } else {
                    None
                };
                let wshape = self.shape(w).to_vec();
                let xshape = self.shape(x).to_vec();
                if self.requires_grad(b) {
                    out.push((b, Tensor::new([c_out], db).unwrap()));
                }
                if let Some(dw) = dw {
                    out.push((w, Tensor::new(wshape, dw).unwrap()));
                }
                if let Some(dx) = dx {
                    out.push((x, Tensor::new(xshape, dx).unwrap()));
                }
            }
            Op::GlobalPool { x, mode, argmax } => {
                let x = *x;
                let xs = self.shape(x).to_vec();
                let mut dx = vec![0.0; self.value(x).len()];
                let hw = xs[xs.len() - 2] * xs[xs.len() - 1];
                match mode {
                    PoolMode::Avg => {
                        for (pi, plane) in dx.chunks_mut(hw).enumerate() {
                            plane.fill(gd[pi] / hw as f64);
                        }
                    }
                    PoolMode::Max => {
                        for (pi, &a) in argmax.iter().enumerate() {
                            dx[pi * hw + a] += gd[pi];
                        }
                    }
                }
                out.push((x, Tensor::new(xs, dx).unwrap()));
            }
            Op::ChannelPool { x, mode, argmax } => {
                let x = *x;
                let xs = self.shape(x).to_vec();
                let (n, c, h, w) = nchw(&xs, "").unwrap();
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for s in 0..n {
                    for p in 0..hw {
                        let go = gd[s * hw + p];
                        match mode {
                            PoolMode::Avg => {
                                for ch in 0..c {
                                    dx[(s * c + ch) * hw + p] += go / c as f64;
                                }
                            }
                            PoolMode::Max => {
                                dx[(s * c + argmax[s * hw + p]) * hw + p] += go;
                            }
                        }
                    }
                }
                out.push((x, Tensor::new(xs, dx).unwrap()));
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let mut dx = Tensor::zeros(self.shape(x));
                {
                    let d = dx.data_mut();
                    for (o, &a) in argmax.iter().enumerate() {
                        d[a] += gd[o];
                    }
                }
                out.push((x, dx));
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                out.push((a, g.clone()));
                out.push((b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.lazy(&mut out, a, |s| zip_map(g, s.value(b), |gv, bv| gv * bv));
                self.lazy(&mut out, b, |s| zip_map(g, s.value(a), |gv, av| gv * av));
            }
            Op::BroadcastMul { a, b } => {
                let (a, b) = (*a, *b);
                let map = BroadcastMap::new(self.shape(a), self.shape(b)).unwrap();
                self.lazy(&mut out, a, |s| {
                    let bv = s.value(b).data();
                    Tensor::new(
                        s.shape(a).to_vec(),
                        gd.iter()
                            .enumerate()
                            .map(|(i, gv)| gv * bv[map.index(i)])
                            .collect(),
                    )
                    .unwrap()
                });
                self.lazy(&mut out, b, |s| {
                    let av = s.value(a).data();
                    let mut db = Tensor::zeros(s.shape(b));
                    let d = db.data_mut();
                    for (i, gv) in gd.iter().enumerate() {
                        d[map.index(i)] += gv * av[i];
                    }
                    db
                });
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                out.push((a, g.map(|v| v * c)));
            }
            Op::Relu(a) => {
                let a = *a;
                self.lazy(&mut out, a, |s| {
                    zip_map(g, s.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 })
                });
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let t = zip_map(g, &node.value, |gv, y| gv * y * (1.0 - y));
                out.push((a, t));
            }
            Op::Exp(a) => {
                let a = *a;
                let t = zip_map(g, &node.value, |gv, y| gv * y);
                out.push((a, t));
            }
            Op::Log(a) => {
                let a = *a;
                self.lazy(&mut out, a, |s| zip_map(g, s.value(a), |gv, x| gv / x));
            }
            Op::Softplus(a) => {
                let a = *a;
                self.lazy(&mut out, a, |s| zip_map(g, s.value(a), |gv, x| gv * math::sigmoid(x)));
            }
            Op::Abs(a) => {
                let a = *a;
                self.lazy(&mut out, a, |s| zip_map(g, s.value(a), |gv, x| gv * sign(x)));
            }
            Op::SmoothL1(a) => {
                let a = *a;
                self.lazy(&mut out, a, |s| {
                    zip_map(g, s.value(a), |gv, d| {
                        if d.abs() < 1.0 {
                            gv * d
                        } else {
                            gv * sign(d)
                        }
                    })
                });
            }
            Op::Concat {
                a,
                b,
                outer,
                a_chunk,
                b_chunk,
            } => {
                let (a, b, outer, ac, bc) = (*a, *b, *outer, *a_chunk, *b_chunk);
                self.lazy(&mut out, a, |s| {
                    let mut d = Vec::with_capacity(outer * ac);
                    for o in 0..outer {
                        let base = o * (ac + bc);
                        d.extend_from_slice(&gd[base..base + ac]);
                    }
                    Tensor::new(s.shape(a).to_vec(), d).unwrap()
                });
                self.lazy(&mut out, b, |s| {
                    let mut d = Vec::with_capacity(outer * bc);
                    for o in 0..outer {
                        let base = o * (ac + bc) + ac;
                        d.extend_from_slice(&gd[base..base + bc]);
                    }
                    Tensor::new(s.shape(b).to_vec(), d).unwrap()
                });
            }
            Op::LogSoftmax(a) => {
                let a = *a;
                let n = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - math::exp(yr[j]) * gs;
                    }
                }
                let shape = node.value.shape().to_vec();
                out.push((a, Tensor::new(shape, d).unwrap()));
            }
            Op::Sum(a) => {
                let a = *a;
                let gv = gd[0];
                self.lazy(&mut out, a, |s| Tensor::full(s.shape(a), gv));
            }
            Op::Reshape(a) => {
                let a = *a;
                self.lazy(&mut out, a, |s| Tensor::new(s.shape(a).to_vec(), gd.to_vec()).unwrap());
            }
            Op::Gather { x, idx } => {
                let x = *x;
                let mut dx = Tensor::zeros(self.shape(x));
                let inner = if idx.is_empty() { 0 } else { gd.len() / idx.len() };
                {
                    let d = dx.data_mut();
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..inner {
                            d[src * inner + j] += gd[r * inner + j];
                        }
                    }
                }
                out.push((x, dx));
            }
            Op::BroadcastSpatial { x, hw } => {
                let (x, hw) = (*x, *hw);
                self.lazy(&mut out, x, |s| {
                    let d = if hw == 0 {
                        vec![0.0; s.value(x).len()]
                    } else {
                        gd.chunks(hw).map(|c| c.iter().sum()).collect()
                    };
                    Tensor::new(s.shape(x).to_vec(), d).unwrap()
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta, batch_stats) = (*x, *gamma, *beta, *batch_stats);
                let (n, c, h, w) = nchw(node.value.shape(), "").unwrap();
                let hw = h * w;
                let m = (n * hw) as f64;
                let gv = self.value(gamma).data();
                let xv = self.value(x).data();
                let mut xhat = vec![0.0; hw];
                let normalize = |pi: usize, xhat: &mut [f64]| {
                    let (mu, is) = (mean[pi % c], inv_std[pi % c]);
                    for (z, v) in xhat.iter_mut().zip(&xv[pi * hw..(pi + 1) * hw]) {
                        *z = (v - mu) * is;
                    }
                };
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (pi, gp) in gd.chunks_exact(hw).enumerate() {
                    normalize(pi, &mut xhat);
                    dgamma[pi % c] += dot_lanes(gp, &xhat);
                    dbeta[pi % c] += sum_lanes(gp);
                }
                let dx = if self.requires_grad(x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    for (pi, gp) in gd.chunks_exact(hw).enumerate() {
                        let ch = pi % c;
                        let (ga, is) = (gv[ch], inv_std[ch]);
                        if batch_stats {
                            normalize(pi, &mut xhat);
                            // sum(dxhat) = gamma·dbeta, sum(dxhat·xhat) = gamma·dgamma
                            let k = is / m;
                            let (sb, sg) = (ga * dbeta[ch], ga * dgamma[ch]);
                            dx.extend(gp.iter().zip(&xhat).map(|(g, z)| k * (m * g * ga - sb - z * sg)));
                        } else {
                            dx.extend(gp.iter().map(|g| g * ga * is));
                        }
                    }
                    Some(dx)
                } else {
                    None
                };
                let xs = node.value.shape().to_vec();
                out.push((gamma, Tensor::new([c], dgamma).unwrap()));
                out.push((beta, Tensor::new([c], dbeta).unwrap()));
                if let Some(dx) = dx {
                    out.push((x, Tensor::new(xs, dx).unwrap()));
                }
            }
            Op::SqDist(a, b) => {
                let (a, b) = (*a, *b);
                let (q, e) = matrix(self.shape(a), "").unwrap();
                let p = self.shape(b)[0];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let mut da = vec![0.0; q * e];
                let mut db = vec![0.0; p * e];
                for i in 0..q {
                    for j in 0..p {
                        let gij = 2.0 * gd[i * p + j];
                        for k in 0..e {
                            let diff = av[i * e + k] - bv[j * e + k];
                            da[i * e + k] += gij * diff;
                            db[j * e + k] -= gij * diff;
                        }
                    }
                }
                out.push((a, Tensor::new([q, e], da).unwrap()));
                out.push((b, Tensor::new([p, e], db).unwrap()));
            }
            Op::Cosine {
                a,
                b,
                norms_a,
                norms_b,
            } => {
                let (a, b) = (*a, *b);
                let (q, e) = matrix(self.shape(a), "").unwrap();
                let s_rows = self.shape(b)[0];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let cos = node.value.data();
                let mut da = vec![0.0; q * e];
                let mut db = vec![0.0; s_rows * e];
                for i in 0..q {
                    for j in 0..s_rows {
                        let (na, nb) = (norms_a[i], norms_b[j]);
                        if na < NORM_FLOOR || nb < NORM_FLOOR {
                            continue;
                        }
                        let gij = gd[i * s_rows + j];
                        let c = cos[i * s_rows + j];
                        for k in 0..e {
                            let (x, y) = (av[i * e + k], bv[j * e + k]);
                            da[i * e + k] += gij * (y / (na * nb) - c * x / (na * na));
                            db[j * e + k] += gij * (x / (na * nb) - c * y / (nb * nb));
                        }
                    }
                }
                out.push((a, Tensor::new([q, e], da).unwrap()));
                out.push((b, Tensor::new([s_rows, e], db).unwrap()));
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = matrix(self.shape(a), "").unwrap();
                let n = self.shape(b)[1];
                self.lazy(&mut out, a, |s| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, gd, (n, 1), s.value(b).data(), (1, n), 0.0, &mut d, (k, 1));
                    Tensor::new([m, k], d).unwrap()
                });
                self.lazy(&mut out, b, |s| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, s.value(a).data(), (1, k), gd, (n, 1), 0.0, &mut d, (n, 1));
                    Tensor::new([k, n], d).unwrap()
                });
            }
            Op::Nll { logp, labels } => {
                let logp = *logp;
                let n = self.shape(logp)[1];
                let mut d = Tensor::zeros(self.shape(logp));
                for (i, &y) in labels.iter().enumerate() {
                    d.data_mut()[i * n + y] = -gd[0];
                }
                out.push((logp, d));
            }
            Op::NormalizeRows { x, rows, norms } => {
                let (x, rows) = (*x, *rows);
                let y = node.value.data();
                let width = y.len() / rows;
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let n = norms[r];
                    if n < NORM_FLOOR {
                        continue;
                    }
                    let span = r * width..(r + 1) * width;
                    let dot: f64 = y[span.clone()].iter().zip(&gd[span.clone()]).map(|(a, b)| a * b).sum();
                    for j in span {
                        d[j] = (gd[j] - y[j] * dot) / n;
                    }
                }
                let xs = node.value.shape().to_vec();
                out.push((x, Tensor::new(xs, d).unwrap()));
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let (r, w) = matrix(self.shape(x), "").unwrap();
                let len = node.value.shape()[1];
                let mut d = vec![0.0; r * w];
                for row in 0..r {
                    d[row * w + start..row * w + start + len]
                        .copy_from_slice(&gd[row * len..(row + 1) * len]);
                }
                out.push((x, Tensor::new([r, w], d).unwrap()));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = backward(&vals, &node.value, g);
                let inputs = inputs.clone();
                for (v, t) in inputs.into_iter().zip(grads) {
                    out.push((v, t));
                }
            }
        }
        out
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data).unwrap()
}

/// First maximum in row-major order.
fn first_argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    (best, xs[best])
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + math::ln(row.iter().map(|v| math::exp(v - m)).sum::<f64>());
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Maps flat indices of a full shape onto a broadcast operand.
struct BroadcastMap {
    extents: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
            return Err(Error::shape(format!(
                "broadcast_mul: {b:?} does not broadcast onto {a:?}"
            )));
        }
        let mut b_strides = vec![0; b.len()];
        let mut stride = 1;
        for i in (0..b.len()).rev() {
            b_strides[i] = if b[i] == 1 { 0 } else { stride };
            stride *= b[i];
        }
        Ok(BroadcastMap {
            extents: a.to_vec(),
            b_strides,
        })
    }

    #[inline]
    fn index(&self, mut flat: usize) -> usize {
        let mut out = 0;
        for i in (0..self.extents.len()).rev() {
            let e = self.extents[i];
            out += (flat % e) * self.b_strides[i];
            flat /= e;
        }
        out
    }
}
