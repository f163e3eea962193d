//! Finite-difference gradient verification.
//!
//! Analytic gradients from the tape are compared against central differences
//! of the same scalar loss. All checks run in f64; the relative error is
//! guarded by max(|analytic|, |numeric|, 1) so near-zero gradients do not
//! explode the ratio.

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest guarded relative error over all checked elements.
    pub max_rel_err: f64,
    /// Number of scalar elements compared.
    pub checked: usize,
}

/// Compare tape gradients of `f` against central finite differences.
///
/// `f` must record a computation from the given leaves to a single-element
/// loss, deterministically (it is re-run ~2 x numel times with perturbed
/// inputs). `eps` is the absolute perturbation step; 1e-5 suits
/// unit-scale inputs.
pub fn grad_check<F>(inputs: &[Array<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |arrays: &[Array<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Array<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, a)| tape.grad(v).cloned().unwrap_or_else(|| Array::zeros(a.shape())))
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Array<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, checked })
}
