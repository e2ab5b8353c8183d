//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Outcome of a gradient check: the worst element over all inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences `(f(x+ε) − f(x−ε)) / 2ε`, element by element.
///
/// `f` receives a fresh graph and one gradient-carrying leaf per input and
/// must return a scalar node.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::config("finite_diff_check: eps must be positive"));
    }
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        g.backward(root)?;
        vars.iter().map(|&v| g.grad_or_zeros(v)).collect()
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            work[ti].data_mut()[j] = x0 + eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[j] = x0 - eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].data()[j];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || !err.is_finite() {
                report = GradCheck {
                    max_rel_error: err,
                    worst: (ti, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
