//! Raw slice kernels behind the graph operations.

/// `c = a·b + beta·c` for row-major-addressable operands given by strides.
///
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`. Strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = if beta == 0.0 { 0.0 } else { *v * beta };
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b out of bounds");
    // SAFETY: the three asserts above bound every element the kernel touches,
    // strides are non-negative and `c` does not alias `a` or `b` (it is a
    // unique borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Sum with eight independent accumulators (fixed order, so deterministic).
#[inline]
pub(crate) fn sum_lanes(x: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let chunks = x.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for v in rest {
        s += v;
    }
    s
}

/// `Σ x·y` with eight independent accumulators.
#[inline]
pub(crate) fn dot_lanes(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0; 8];
    let (cx, cy) = (x.chunks_exact(8), y.chunks_exact(8));
    let (rx, ry) = (cx.remainder(), cy.remainder());
    for (a8, b8) in cx.zip(cy) {
        for ((a, u), v) in acc.iter_mut().zip(a8).zip(b8) {
            *a += u * v;
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (u, v) in rx.iter().zip(ry) {
        s += u * v;
    }
    s
}

/// Geometry of a square-kernel, stride-1 convolution over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    #[inline]
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    #[inline]
    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Valid output columns `[lo, hi)` for kernel column `kj`, with the input
/// column at `ow` being `ow + kj − pad`.
#[inline]
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(g.w_out);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.w_out).max(lo);
    (lo, hi)
}

/// Unfolds one `c_in×h×w` sample into a `(c_in·k·k)×(h_out·w_out)` block of
/// `cols`, whose rows are `ld` elements apart.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64], ld: usize) {
    let (k, pad) = (g.k, g.pad as isize);
    let ncol = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + ncol];
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.h_out {
                    let ih = oh as isize + ki as isize - pad;
                    let line = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if hi == lo {
                        continue;
                    }
                    let s0 = lo + kj - g.pad;
                    line[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], ld: usize, dx: &mut [f64]) {
    let (k, pad) = (g.k, g.pad as isize);
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld..];
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.h_out {
                    let ih = oh as isize + ki as isize - pad;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    if hi == lo {
                        continue;
                    }
                    let line = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let s0 = lo + kj - g.pad;
                    let from = &src[oh * g.w_out + lo..oh * g.w_out + hi];
                    for (d, v) in line[s0..s0 + (hi - lo)].iter_mut().zip(from) {
                        *d += v;
                    }
                }
            }
        }
    }
}
