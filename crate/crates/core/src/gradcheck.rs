//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker never touches tape internals: it re-evaluates a loss closure
//! at perturbed inputs, so it stays an independent oracle for whatever the
//! closure computes.

/// Relative error with an absolute floor of 1 so near-zero gradients are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central difference d loss / d theta_i for one coordinate of `params`.
pub fn central_diff(
    params: &[f64],
    index: usize,
    step: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut probe = params.to_vec();
    probe[index] = params[index] + step;
    let up = loss(&probe);
    probe[index] = params[index] - step;
    let down = loss(&probe);
    (up - down) / (2.0 * step)
}

/// Checks an analytic gradient against central differences on every
/// coordinate. Returns the worst relative error.
pub fn max_grad_error(
    params: &[f64],
    analytic: &[f64],
    step: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let numeric = central_diff(params, i, step, &mut loss);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Same as `max_grad_error` but only over the listed coordinates.
pub fn max_grad_error_at(
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    step: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for &i in indices {
        let numeric = central_diff(params, i, step, &mut loss);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_quadratic() {
        // loss = sum(x^2), gradient 2x
        let params = vec![1.0, -2.0, 0.5];
        let loss = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
        for (i, &p) in params.iter().enumerate() {
            let fd = central_diff(&params, i, 1e-5, loss);
            assert!(rel_err(fd, 2.0 * p) < 1e-9);
        }
    }

    #[test]
    fn rel_err_floors_small_magnitudes() {
        assert!(rel_err(1e-12, 0.0) < 1e-11);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
