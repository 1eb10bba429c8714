use serde::Serialize;

use super::tape::{ReversalMode, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|a − n| / max(|a|, |n|, 1e-3)` per element.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Finite-difference oracle for a scalar-valued tape function.
///
/// With `flip_reversed` the oracle perturbs every `gradient_reversal` path in
/// the opposite direction, so its numeric derivative carries the same sign
/// flip the backward pass applies. Without it, any function that routes `x`
/// through a reversal fails the check.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64, flip_reversed: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    // analytic pass, also recording the reversal anchors at the base point
    let mut tape = Tape::new();
    tape.reversal = ReversalMode::Record(Vec::new());
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    tape.backward(out)?;
    let analytic = tape.grad_tensor(xv).into_data();
    let anchors = match std::mem::take(&mut tape.reversal) {
        ReversalMode::Record(a) => a,
        _ => unreachable!(),
    };

    let eval = |point: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        if flip_reversed {
            t.reversal = ReversalMode::Reflect {
                anchors: anchors.clone(),
                cursor: 0,
            };
        }
        let v = t.constant(point.clone());
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut point = x.clone();
    for i in 0..x.numel() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + eps;
        let plus = eval(&point)?;
        point.data_mut()[i] = orig - eps;
        let minus = eval(&point)?;
        point.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    })
}
