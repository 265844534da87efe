//! Central finite-difference verification of reverse (vector-Jacobian) passes.

use super::{Rng, Tensor};
use crate::error::{dim_err, Error, Result};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Max relative error across every input coordinate.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Max relative error per input tensor.
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Checks `backward` against central differences of `forward`.
///
/// The output is reduced to a scalar `Σ r ⊙ y` with a seeded Gaussian `r`
/// (or `r = 1` for scalar outputs); `backward(inputs, r)` must return one
/// gradient per input. Per-coordinate relative error is
/// `|a − n| / max(|a|, |n|, floor)` where `floor` is 1e-3 of the largest
/// finite-difference gradient magnitude over all inputs.
pub fn grad_check<F, B>(
    forward: F,
    backward: B,
    inputs: &[Tensor],
    tol: f64,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    B: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    let y = forward(inputs)?;
    if !y.is_finite() {
        return Err(Error::Numerical(
            "grad_check aborted: forward value is not finite".into(),
        ));
    }
    let r = if y.len() == 1 {
        Tensor::full(y.shape(), 1.0)
    } else {
        Tensor::randn(y.shape(), 1.0, &mut Rng::new(seed))
    };
    let analytic = backward(inputs, &r)?;
    if analytic.len() != inputs.len() {
        return Err(dim_err(format!(
            "backward returned {} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }

    let project = |t: &Tensor| -> f64 { t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum() };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numerics = Vec::with_capacity(inputs.len());
    for (idx, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[idx].shape() {
            return Err(dim_err(format!(
                "gradient {idx} has shape {:?}, input has {:?}",
                grad.shape(),
                inputs[idx].shape()
            )));
        }
        let mut numeric = Vec::with_capacity(grad.len());
        for k in 0..grad.len() {
            let orig = work[idx].data()[k];
            work[idx].data_mut()[k] = orig + FD_STEP;
            let fp = forward(&work)?;
            work[idx].data_mut()[k] = orig - FD_STEP;
            let fm = forward(&work)?;
            work[idx].data_mut()[k] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numerical(format!(
                    "grad_check aborted: non-finite forward at input {idx}, coordinate {k}"
                )));
            }
            numeric.push((project(&fp) - project(&fm)) / (2.0 * FD_STEP));
        }
        numerics.push(numeric);
    }

    let scale = numerics
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale + 1e-12;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_abs = 0.0f64;
    let mut coords = 0;
    for (grad, numeric) in analytic.iter().zip(&numerics) {
        coords += numeric.len();
        let mut worst = 0.0f64;
        for (&a, &n) in grad.data().iter().zip(numeric) {
            let abs = (a - n).abs();
            max_abs = max_abs.max(abs);
            worst = worst.max(abs / a.abs().max(n.abs()).max(floor));
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        max_rel_error,
        max_abs_error: max_abs,
        per_input,
        coords_checked: coords,
        tol,
        passed: max_rel_error <= tol,
    })
}
