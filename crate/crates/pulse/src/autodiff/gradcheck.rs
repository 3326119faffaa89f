//! Finite-difference verification of analytic gradients.

use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// (input index, coordinate) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central differences for a scalar
/// function of the given leaf inputs.
///
/// `f` must rebuild its graph from the inputs on every call (their data
/// buffers are perturbed in place between calls). Relative error per
/// coordinate is `|a - n| / max(|a|, |n|)`, treated as 0 when both
/// magnitudes are below 1e-10.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut coords_checked = 0usize;
    for (ii, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            t.nudge(k, eps);
            let hi = f(inputs)?.item();
            t.nudge(k, -2.0 * eps);
            let lo = f(inputs)?.item();
            t.nudge(k, eps);
            let numeric = (hi - lo) / (2.0 * eps);
            let a = analytic[ii][k];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < 1e-10 {
                0.0
            } else {
                (a - numeric).abs() / denom
            };
            coords_checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((ii, k));
            }
        }
    }
    for t in inputs {
        t.zero_grad();
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        coords_checked,
    })
}
