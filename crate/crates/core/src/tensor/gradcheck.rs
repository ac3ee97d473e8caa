//! Central finite differences for verifying reverse-mode gradients.

use super::Tensor;
use crate::error::Result;

/// Default perturbation for 64-bit central differences.
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for relative errors, so components whose true
/// gradient is ~0 are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Numerical gradient of `eval` at `params`, one central difference per
/// element. `eval` receives the full perturbed parameter list.
pub fn finite_difference(
    params: &[Tensor<f64>],
    step: f64,
    mut eval: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
) -> Result<Vec<Tensor<f64>>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut g = Tensor::zeros(params[i].shape());
        for j in 0..params[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Largest element-wise relative error between two gradient lists.
pub fn max_relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.shape(), n.shape());
            a.data().iter().zip(n.data()).map(|(&x, &y)| relative_error(x, y))
        })
        .fold(0.0, f64::max)
}
