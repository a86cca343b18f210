use alloc::vec::Vec;

use super::{Graph, Tensor};
use crate::{Error, Result};

/// Denominator floor for the relative error. Central differences carry
/// round-off of order `ε·|f|/h`, so coordinates whose true gradient is zero
/// would otherwise compare noise against noise.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over coordinates of `|a − n| / max(|a| + |n|, REL_FLOOR)`.
    pub max_rel_error: f64,
    /// Coordinate attaining the max.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates whose perturbed evaluations or gradients were not finite.
    pub non_finite: Vec<usize>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error < tol
    }
}

/// Compares the reverse-mode gradient of `f` at `x` with central differences
/// of step `h`, all in `f64`.
///
/// `f` receives a fresh graph and the leaf holding `x` (shape `shape`) and
/// must return a rank-0 tensor.
pub fn finite_diff_check<F>(f: F, shape: &[usize], x: &[f64], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Tensor) -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("step must be positive, got {h}")));
    }
    let eval = |values: Vec<f64>, grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let leaf = g.leaf(shape, values, grad)?;
        let root = f(&mut g, leaf)?;
        let val = g.item(root);
        if grad {
            g.backward(root)?;
            Ok((val, g.grad(leaf).map(|s| s.to_vec())))
        } else {
            Ok((val, None))
        }
    };

    let (_, analytic) = eval(x.to_vec(), true)?;
    let analytic = analytic.unwrap_or_else(|| alloc::vec![0.0; x.len()]);
    let mut numeric = Vec::with_capacity(x.len());
    let mut non_finite = Vec::new();
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let (fp, _) = eval(plus, false)?;
        let (fm, _) = eval(minus, false)?;
        let n = (fp - fm) / (2.0 * h);
        numeric.push(n);
        let a = analytic[i];
        if !n.is_finite() || !a.is_finite() {
            non_finite.push(i);
            continue;
        }
        let rel = (a - n).abs() / (a.abs() + n.abs()).max(REL_FLOOR);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        non_finite,
    })
}
