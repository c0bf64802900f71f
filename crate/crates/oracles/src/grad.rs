//! Central finite-difference gradients for checking analytic backprop.

/// Approximates df/dx_i for every parameter with central differences at
/// step `eps`. `f` must be deterministic in its input.
pub fn oracle_fd_gradient<F>(mut f: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let up = f(&work);
        work[i] = orig - eps;
        let down = f(&work);
        work[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Largest relative error between an analytic gradient and the
/// finite-difference estimate, with an absolute floor so near-zero entries
/// do not blow up the ratio.
pub fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| {
            let denom = a.abs().max(b.abs()).max(1e-8);
            (a - b).abs() / denom
        })
        .fold(0.0, f64::max)
}
