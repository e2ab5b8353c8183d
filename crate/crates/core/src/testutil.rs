//! Random inputs and nested-loop reference implementations for unit tests.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Shuffled values in `(-1, 1)` at least `1/n` apart, so max-style ops have
/// no near-ties within a finite-difference step.
pub fn spaced_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| (2.0 * (i as f64 + rng.gen_range(0.25..0.75))) / n as f64 - 1.0)
        .collect();
    v.shuffle(rng);
    Tensor::from_fn(shape, |i| v[i])
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape(), "shapes differ");
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d:e} > {tol:e}");
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Direct cross-correlation of one `C×H×W` image.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = b.data()[o];
                for c in 0..ci {
                    for u in 0..k {
                        for v in 0..k {
                            let (r, q) = (i + u, j + v);
                            if r < pad || q < pad || r - pad >= h || q - pad >= wd {
                                continue;
                            }
                            s += w.data()[((o * ci + c) * k + u) * k + v]
                                * x.data()[(c * h + r - pad) * wd + q - pad];
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = s;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

/// `(max, mean)` over the spatial extent of each channel, as `C×1×1`.
pub fn global_pool_oracle(x: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut mx = Vec::new();
    let mut av = Vec::new();
    for ch in 0..c {
        let mut m = f64::NEG_INFINITY;
        let mut s = 0.0;
        for i in 0..h {
            for j in 0..w {
                let v = x.data()[(ch * h + i) * w + j];
                if v > m {
                    m = v;
                }
                s += v;
            }
        }
        mx.push(m);
        av.push(s / (h * w) as f64);
    }
    (
        Tensor::new(vec![c, 1, 1], mx).unwrap(),
        Tensor::new(vec![c, 1, 1], av).unwrap(),
    )
}

/// `(max, mean)` across channels at each position, as `1×H×W`.
pub fn channel_pool_oracle(x: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut mx = vec![f64::NEG_INFINITY; h * w];
    let mut av = vec![0.0; h * w];
    for ch in 0..c {
        for p in 0..h * w {
            let v = x.data()[ch * h * w + p];
            if v > mx[p] {
                mx[p] = v;
            }
            av[p] += v / c as f64;
        }
    }
    (
        Tensor::new(vec![1, h, w], mx).unwrap(),
        Tensor::new(vec![1, h, w], av).unwrap(),
    )
}

/// 2×2 stride-2 max pooling of one `C×H×W` image.
pub fn max_pool2_oracle(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    Tensor::from_fn(&[c, oh, ow], |idx| {
        let (ch, i, j) = (idx / (oh * ow), idx / ow % oh, idx % ow);
        let mut m = f64::NEG_INFINITY;
        for u in 0..2 {
            for v in 0..2 {
                m = m.max(x.data()[(ch * h + 2 * i + u) * w + 2 * j + v]);
            }
        }
        m
    })
}

/// `ln Σ exp` with max subtraction, then `x − lse`.
pub fn log_softmax_oracle(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for &v in x {
        s += libm::exp(v - m);
    }
    let lse = m + libm::log(s);
    x.iter().map(|v| v - lse).collect()
}
