//! Structural similarity over the valid (fully interior) window region.
//!
//! Windows are 11x11 Gaussian (sigma 1.5), classic stabilizers C1 = 0.01^2
//! and C2 = 0.03^2. The score is averaged over every window position whose
//! support lies entirely inside the image, over all three channels. Images
//! smaller than the window have no valid positions and report `None`.
//!
//! The analytic gradient treats each window score as a function of the five
//! filtered statistics (mean of x, mean of y, and the raw second moments);
//! the chain rule back to pixels is then three correlations of per-window
//! adjoint fields with the (symmetric) Gaussian kernel:
//!
//!   dM/dx = G * a_mu + 2 x . (G * a_xx) + y . (G * a_xy)
//!
//! Zero padding is exact here because adjoints vanish outside the valid
//! region.

pub const WINDOW: usize = 11;
const RADIUS: usize = WINDOW / 2;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable 2-D correlation with zero padding outside the image.
fn conv_sep(src: &[f64], width: usize, height: usize, k: &[f64; WINDOW], dst: &mut [f64]) {
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - RADIUS as isize;
                if xx >= 0 && (xx as usize) < width {
                    s += kv * src[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = s;
        }
    }
    for y in 0..height {
        for x in 0..width {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - RADIUS as isize;
                if yy >= 0 && (yy as usize) < height {
                    s += kv * tmp[yy as usize * width + x];
                }
            }
            dst[y * width + x] = s;
        }
    }
}

/// Mean structural similarity of `x` against `y` plus its gradient with
/// respect to `x`. Returns `None` when no 11x11 window fits.
pub fn ssim_with_grad(
    x: &[[f64; 3]],
    y: &[[f64; 3]],
    width: usize,
    height: usize,
) -> Option<(f64, Vec<[f64; 3]>)> {
    assert_eq!(x.len(), width * height);
    assert_eq!(y.len(), x.len());
    if width < WINDOW || height < WINDOW {
        return None;
    }
    let k = kernel();
    let n = width * height;
    let n_valid = (width - WINDOW + 1) * (height - WINDOW + 1);
    let norm = 1.0 / (3.0 * n_valid as f64);

    let mut grad = vec![[0.0; 3]; n];
    let mut total = 0.0;

    // per-channel planes and filtered statistics
    let mut xc = vec![0.0; n];
    let mut yc = vec![0.0; n];
    let mut prod = vec![0.0; n];
    let mut mu_x = vec![0.0; n];
    let mut mu_y = vec![0.0; n];
    let mut s_xx = vec![0.0; n];
    let mut s_yy = vec![0.0; n];
    let mut s_xy = vec![0.0; n];
    let mut a_mu = vec![0.0; n];
    let mut a_xx = vec![0.0; n];
    let mut a_xy = vec![0.0; n];
    let mut g_mu = vec![0.0; n];
    let mut g_xx = vec![0.0; n];
    let mut g_xy = vec![0.0; n];

    for ch in 0..3 {
        for i in 0..n {
            xc[i] = x[i][ch];
            yc[i] = y[i][ch];
            prod[i] = xc[i] * xc[i];
        }
        conv_sep(&xc, width, height, &k, &mut mu_x);
        conv_sep(&prod, width, height, &k, &mut s_xx);
        for i in 0..n {
            prod[i] = yc[i] * yc[i];
        }
        conv_sep(&yc, width, height, &k, &mut mu_y);
        conv_sep(&prod, width, height, &k, &mut s_yy);
        for i in 0..n {
            prod[i] = xc[i] * yc[i];
        }
        conv_sep(&prod, width, height, &k, &mut s_xy);

        a_mu.fill(0.0);
        a_xx.fill(0.0);
        a_xy.fill(0.0);
        for py in RADIUS..height - RADIUS {
            for px in RADIUS..width - RADIUS {
                let i = py * width + px;
                let (mx, my) = (mu_x[i], mu_y[i]);
                let var_x = s_xx[i] - mx * mx;
                let var_y = s_yy[i] - my * my;
                let cov = s_xy[i] - mx * my;
                let a1 = 2.0 * mx * my + C1;
                let a2 = 2.0 * cov + C2;
                let b1 = mx * mx + my * my + C1;
                let b2 = var_x + var_y + C2;
                let s = (a1 * a2) / (b1 * b2);
                total += s;
                // partials w.r.t. the filtered stats (mu_x, s_xx, s_xy)
                let d_mu = (2.0 * my * a2 - 2.0 * my * a1) / (b1 * b2)
                    - s * (2.0 * mx / b1 - 2.0 * mx / b2);
                let d_sxx = -s / b2;
                let d_sxy = 2.0 * a1 / (b1 * b2);
                a_mu[i] = norm * d_mu;
                a_xx[i] = norm * d_sxx;
                a_xy[i] = norm * d_sxy;
            }
        }
        conv_sep(&a_mu, width, height, &k, &mut g_mu);
        conv_sep(&a_xx, width, height, &k, &mut g_xx);
        conv_sep(&a_xy, width, height, &k, &mut g_xy);
        for i in 0..n {
            grad[i][ch] = g_mu[i] + 2.0 * xc[i] * g_xx[i] + yc[i] * g_xy[i];
        }
    }
    Some((total * norm, grad))
}

/// Forward-only mean structural similarity (same contract as
/// [`ssim_with_grad`]).
pub fn ssim_mean(x: &[[f64; 3]], y: &[[f64; 3]], width: usize, height: usize) -> Option<f64> {
    ssim_with_grad(x, y, width, height).map(|(v, _)| v)
}
