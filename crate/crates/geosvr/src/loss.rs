//! Photometric loss between a rendered view and its training image.
//!
//! The objective is mean squared error over all pixel/channel entries plus an
//! optional structural-similarity term weighted by `ssim_weight` (0 disables
//! it). Both pieces are differentiated analytically with respect to the
//! rendered colors so the result feeds straight into the color adjoint of the
//! backward pass.
//!
//! Shape notes:
//! - images are row-major `[r, g, b]` per pixel, `width * height` entries
//! - the structural term needs at least an 11x11 image; below that it
//!   contributes exactly zero (value and gradient) rather than erroring
//! - the gradient buffer has one `[f64; 3]` per pixel, same layout as input

use crate::ssim;

/// Compute the photometric loss and its gradient with respect to the
/// rendered image. Returns `(loss, d_loss/d_rendered)`.
pub fn photometric_with_grad(
    rendered: &[[f64; 3]],
    target: &[[f64; 3]],
    width: usize,
    height: usize,
    ssim_weight: f64,
) -> (f64, Vec<[f64; 3]>) {
    assert_eq!(rendered.len(), width * height, "rendered size mismatch");
    assert_eq!(target.len(), rendered.len(), "target size mismatch");
    let n_entries = (rendered.len() * 3) as f64;
    let mut grad = vec![[0.0f64; 3]; rendered.len()];
    let mut mse = 0.0;
    for (i, (r, t)) in rendered.iter().zip(target.iter()).enumerate() {
        for c in 0..3 {
            let d = r[c] - t[c];
            mse += d * d;
            grad[i][c] = 2.0 * d / n_entries;
        }
    }
    mse /= n_entries;
    let mut loss = mse;
    if ssim_weight != 0.0 {
        if let Some((score, s_grad)) = ssim::ssim_with_grad(rendered, target, width, height) {
            loss += ssim_weight * (1.0 - score);
            for (g, sg) in grad.iter_mut().zip(s_grad.iter()) {
                for c in 0..3 {
                    g[c] -= ssim_weight * sg[c];
                }
            }
        }
    }
    (loss, grad)
}

/// Loss value only; used by finite-difference probes and logging.
pub fn photometric(
    rendered: &[[f64; 3]],
    target: &[[f64; 3]],
    width: usize,
    height: usize,
    ssim_weight: f64,
) -> f64 {
    assert_eq!(rendered.len(), width * height, "rendered size mismatch");
    assert_eq!(target.len(), rendered.len(), "target size mismatch");
    let n_entries = (rendered.len() * 3) as f64;
    let mut mse = 0.0;
    for (r, t) in rendered.iter().zip(target.iter()) {
        for c in 0..3 {
            let d = r[c] - t[c];
            mse += d * d;
        }
    }
    mse /= n_entries;
    let mut loss = mse;
    if ssim_weight != 0.0 {
        if let Some(score) = ssim::ssim_mean(rendered, target, width, height) {
            loss += ssim_weight * (1.0 - score);
        }
    }
    loss
}
