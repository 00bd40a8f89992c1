//! Central finite-difference verification of reverse-mode gradients.
//!
//! The finite-difference side only ever evaluates forward values, so it is
//! independent of the backward code it checks.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Per-input comparison between the tape gradient and finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per input tensor.
    pub rel_errs: Vec<f64>,
    /// Largest elementwise absolute difference per input tensor.
    pub max_abs_errs: Vec<f64>,
    /// `max(‖analytic‖, ‖numeric‖)` per input tensor.
    pub grad_norms: Vec<f64>,
}

/// Gradient norm below which both sides are treated as zero. Some gradients
/// vanish identically (an attention key bias is cancelled by the softmax),
/// and their relative error only measures finite-difference rounding.
pub const VANISHING_NORM: f64 = 1e-6;

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_errs.iter().copied().fold(0.0, f64::max)
    }

    /// Largest relative error over inputs whose gradient does not vanish.
    pub fn max_rel_err_nonvanishing(&self) -> f64 {
        self.rel_errs
            .iter()
            .zip(&self.grad_norms)
            .filter(|(_, &n)| n >= VANISHING_NORM)
            .map(|(&e, _)| e)
            .fold(0.0, f64::max)
    }

    /// Indices of inputs that fail `tol`. A vanishing gradient fails only if
    /// the two sides differ by more than [`VANISHING_NORM`] elementwise.
    pub fn failures(&self, tol: f64) -> Vec<usize> {
        (0..self.rel_errs.len())
            .filter(|&i| {
                if self.grad_norms[i] < VANISHING_NORM {
                    self.max_abs_errs[i] > VANISHING_NORM
                } else {
                    self.rel_errs[i] > tol
                }
            })
            .collect()
    }
}

/// Relative error of two gradient tensors under the norm convention above.
/// Two all-zero gradients compare as equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Builds `f` on a fresh tape with every input as a variable leaf, then
/// compares the backward pass with central differences of step `h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rel_errs = Vec::with_capacity(inputs.len());
    let mut max_abs_errs = Vec::with_capacity(inputs.len());
    let mut grad_norms = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        rel_errs.push(relative_error(analytic.data(), &numeric));
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        grad_norms.push(norm(analytic.data()).max(norm(&numeric)));
        max_abs_errs.push(
            analytic
                .data()
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).abs())
                .fold(0.0, f64::max),
        );
    }
    Ok(GradCheckReport {
        rel_errs,
        max_abs_errs,
        grad_norms,
    })
}
