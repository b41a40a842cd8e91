//! Voxel-uncertainty depth constraint.
//!
//! Three pieces:
//!  - per-voxel uncertainty `u_base` / `u_geom` (coarse voxels with little
//!    density are where geometry is least trustworthy),
//!  - the per-pixel uncertainty weight map from the rendered level map,
//!  - a patch-wise global-local depth loss against a monocular depth map
//!    that is only affinely trustworthy (per-patch median/MAD normalization
//!    makes the comparison scale- and shift-invariant).
//!
//! Gradient semantics: the weight map and all median/MAD normalizers are
//! recomputed every iteration but treated as constants by the gradient
//! (frozen into a [`DepthPlan`]). `eval_depth` is the exact objective the
//! analytic gradient differentiates, so finite differences on it certify
//! `backward_depth` directly.

use crate::error::{EngineError, Result};
use crate::grid::{self, OctreeWorld};

/// Base uncertainty of a voxel at `level`: world size over the scaled,
/// offset level. Errors when the denominator is not positive.
pub fn u_base(level: f64, world_size: f64, beta: f64, l0: f64) -> Result<f64> {
    let denom = beta * (level + l0);
    if !(denom > 0.0) {
        return Err(EngineError::Numeric(format!(
            "uncertainty denominator beta*(l+l0) = {denom} must be positive"
        )));
    }
    Ok(world_size / denom)
}

/// Activated density at a voxel's center: the trilinear blend of activated
/// corners at the midpoint, i.e. their mean.
pub fn center_density(world: &OctreeWorld, slot: usize) -> f64 {
    let raw = &world.raw_geo[slot];
    let mut sum = 0.0;
    for &r in raw {
        sum += grid::activate(r);
    }
    sum / 8.0
}

/// Geometric uncertainty: base uncertainty damped by how much density the
/// voxel actually carries (an empty voxel is certain to be empty).
pub fn u_geom(world: &OctreeWorld, slot: usize, beta: f64, l0: f64) -> Result<f64> {
    let level = world.keys[slot].level as f64;
    let base = u_base(level, world.world_size, beta, l0)?;
    Ok(base * (1.0 - (-center_density(world, slot)).exp()))
}

/// Per-pixel uncertainty weight from a rendered level map.
///
/// Over hit pixels: `W_l = max(L) - min(L)`, `W = W_l / max(1, L - min(L))`.
/// Non-hit pixels get 0. A degenerate view (`W_l < 1`, e.g. a uniform level
/// map at initialization) falls back to weight 1 on every hit pixel so the
/// constraint never silently switches off.
pub fn unc_weight(levels: &[f64], hit: &[bool]) -> Vec<f64> {
    assert_eq!(levels.len(), hit.len());
    let mut min_l = f64::INFINITY;
    let mut max_l = f64::NEG_INFINITY;
    for (l, &h) in levels.iter().zip(hit) {
        if h {
            min_l = min_l.min(*l);
            max_l = max_l.max(*l);
        }
    }
    let w_l = max_l - min_l;
    let mut out = vec![0.0; levels.len()];
    if !w_l.is_finite() {
        return out; // no hit pixels
    }
    for i in 0..levels.len() {
        if hit[i] {
            out[i] = if w_l < 1.0 {
                1.0
            } else {
                w_l / (levels[i] - min_l).max(1.0)
            };
        }
    }
    out
}

/// Median (average of the two middle elements for even counts).
fn median(vals: &mut Vec<f64>) -> f64 {
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Median and mean absolute deviation around it.
fn med_mad(vals: &mut Vec<f64>) -> (f64, f64) {
    let med = median(vals);
    let mad = vals.iter().map(|v| (v - med).abs()).sum::<f64>() / vals.len() as f64;
    (med, mad)
}

/// Frozen per-iteration constants of the depth loss. Everything except the
/// rendered depth values themselves lives here.
#[derive(Clone, Debug)]
pub struct DepthPlan {
    pub width: usize,
    pub height: usize,
    /// Uncertainty weight, zero on invalid pixels.
    pub w_unc: Vec<f64>,
    /// Pixels that contribute loss: valid and inside a non-skipped patch.
    pub active: Vec<bool>,
    /// Denominator of the mean: count of valid (hit, mono-valid) pixels.
    pub n_valid: usize,
    /// Per-pixel copy of its patch's frozen normalizers for rendered depth.
    pub med_d: Vec<f64>,
    pub mad_d: Vec<f64>,
    /// Patch-normalized monocular depth.
    pub norm_mono_patch: Vec<f64>,
    /// Global frozen normalizers for rendered depth.
    pub gmed_d: f64,
    pub gmad_d: f64,
    /// Globally normalized monocular depth.
    pub norm_mono_global: Vec<f64>,
    pub eps_n: f64,
}

const MIN_PATCH_PIXELS: usize = 4;

/// Builds the frozen constants for one iteration's depth loss.
///
/// A pixel is valid when the renderer hit a surface and the monocular map
/// has a value (> 0). The image is partitioned into `patch` x `patch` tiles
/// (edge tiles may be smaller); tiles with fewer than 4 valid pixels are
/// skipped and contribute zero loss.
pub fn plan_depth(
    depth: &[f64],
    mono: &[f64],
    hit: &[bool],
    w_unc: &[f64],
    width: usize,
    height: usize,
    patch: usize,
    eps_n: f64,
) -> DepthPlan {
    assert!(patch >= 1 && patch % 2 == 1, "patch size must be odd");
    let n = width * height;
    assert_eq!(depth.len(), n);
    assert_eq!(mono.len(), n);
    assert_eq!(hit.len(), n);
    assert_eq!(w_unc.len(), n);

    let valid: Vec<bool> = (0..n).map(|i| hit[i] && mono[i] > 0.0).collect();
    let n_valid = valid.iter().filter(|v| **v).count();

    let mut active = vec![false; n];
    let mut med_d = vec![0.0; n];
    let mut mad_d = vec![0.0; n];
    let mut norm_mono_patch = vec![0.0; n];

    let tiles_x = width.div_ceil(patch);
    let tiles_y = height.div_ceil(patch);
    let mut d_vals = Vec::with_capacity(patch * patch);
    let mut m_vals = Vec::with_capacity(patch * patch);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let x0 = tx * patch;
            let y0 = ty * patch;
            let x1 = (x0 + patch).min(width);
            let y1 = (y0 + patch).min(height);
            d_vals.clear();
            m_vals.clear();
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = y * width + x;
                    if valid[i] {
                        d_vals.push(depth[i]);
                        m_vals.push(mono[i]);
                    }
                }
            }
            if d_vals.len() < MIN_PATCH_PIXELS {
                continue;
            }
            let (dm, dmad) = med_mad(&mut d_vals);
            let (mm, mmad) = med_mad(&mut m_vals);
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = y * width + x;
                    if valid[i] {
                        active[i] = true;
                        med_d[i] = dm;
                        mad_d[i] = dmad;
                        norm_mono_patch[i] = (mono[i] - mm) / (mmad + eps_n);
                    }
                }
            }
        }
    }

    // global normalization over every valid pixel
    let mut gd: Vec<f64> = (0..n).filter(|&i| valid[i]).map(|i| depth[i]).collect();
    let mut gm: Vec<f64> = (0..n).filter(|&i| valid[i]).map(|i| mono[i]).collect();
    let (gmed_d, gmad_d, gmed_m, gmad_m) = if gd.is_empty() {
        (0.0, 0.0, 0.0, 0.0)
    } else {
        let (a, b) = med_mad(&mut gd);
        let (c, d) = med_mad(&mut gm);
        (a, b, c, d)
    };
    let norm_mono_global: Vec<f64> = (0..n)
        .map(|i| {
            if valid[i] {
                (mono[i] - gmed_m) / (gmad_m + eps_n)
            } else {
                0.0
            }
        })
        .collect();

    DepthPlan {
        width,
        height,
        w_unc: (0..n).map(|i| if valid[i] { w_unc[i] } else { 0.0 }).collect(),
        active,
        n_valid,
        med_d,
        mad_d,
        norm_mono_patch,
        gmed_d,
        gmad_d,
        norm_mono_global,
        eps_n,
    }
}

/// Patch and global components of the loss, separately (both already
/// weighted by `w_unc` and averaged over valid pixels).
pub fn eval_depth_components(plan: &DepthPlan, depth: &[f64]) -> (f64, f64) {
    assert_eq!(depth.len(), plan.w_unc.len());
    if plan.n_valid == 0 {
        return (0.0, 0.0);
    }
    let mut patch_sum = 0.0;
    let mut global_sum = 0.0;
    for i in 0..depth.len() {
        if !plan.active[i] {
            continue;
        }
        let nd = (depth[i] - plan.med_d[i]) / (plan.mad_d[i] + plan.eps_n);
        let gd = (depth[i] - plan.gmed_d) / (plan.gmad_d + plan.eps_n);
        patch_sum += plan.w_unc[i] * (nd - plan.norm_mono_patch[i]).abs();
        global_sum += plan.w_unc[i] * (gd - plan.norm_mono_global[i]).abs();
    }
    let inv = 1.0 / plan.n_valid as f64;
    (patch_sum * inv, global_sum * inv)
}

/// The depth loss under the plan's frozen constants: mean over valid pixels
/// of `w_unc * (patch term + 0.5 * global term)`.
pub fn eval_depth(plan: &DepthPlan, depth: &[f64]) -> f64 {
    let (p, g) = eval_depth_components(plan, depth);
    p + 0.5 * g
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Accumulates `weight * d(eval_depth)/d(depth)` into `a_depth`.
pub fn backward_depth(plan: &DepthPlan, depth: &[f64], weight: f64, a_depth: &mut [f64]) {
    assert_eq!(depth.len(), plan.w_unc.len());
    assert_eq!(a_depth.len(), depth.len());
    if plan.n_valid == 0 {
        return;
    }
    let inv = weight / plan.n_valid as f64;
    for i in 0..depth.len() {
        if !plan.active[i] {
            continue;
        }
        let nd = (depth[i] - plan.med_d[i]) / (plan.mad_d[i] + plan.eps_n);
        let gd = (depth[i] - plan.gmed_d) / (plan.gmad_d + plan.eps_n);
        let s_patch = sgn(nd - plan.norm_mono_patch[i]) / (plan.mad_d[i] + plan.eps_n);
        let s_global = sgn(gd - plan.norm_mono_global[i]) / (plan.gmad_d + plan.eps_n);
        a_depth[i] += inv * plan.w_unc[i] * (s_patch + 0.5 * s_global);
    }
}
