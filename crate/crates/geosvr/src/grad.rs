//! Reverse-mode gradients of the renderer outputs with respect to raw
//! densities and SH coefficients, plus the finite-difference oracle that
//! certifies them.
//!
//! The backward pass replays the per-pixel segment tape recorded by the
//! forward render, so the function being differentiated is exactly the one
//! the forward pass evaluated: segment geometry, early-termination points,
//! and normal-orientation signs are all frozen in the tape. Selection-type
//! quantities (dropout subsets, occlusion masks, surface flags) carry no
//! gradient by construction.
//!
//! Determinism: per-pixel backward work is pure and runs in parallel, but
//! accumulation into the store happens in a sequential drain in pixel
//! order, so results are bitwise reproducible at any thread count.

use crate::camera::Camera;
use crate::error::{EngineError, Result};
use crate::grid::{activate, activate_deriv, OctreeWorld};
use crate::math::Vec3;
use crate::render::{voxel_normal, RenderOpts, SegRec, Tape};
use crate::sh;
use rayon::prelude::*;

/// Gradient accumulators mirroring the world's parameter layout, plus the
/// per-voxel priority used by adaptive subdivision.
#[derive(Clone, Debug)]
pub struct GradientStore {
    pub d_raw: Vec<[f64; 8]>,
    /// Same flat layout as `OctreeWorld::sh`.
    pub d_sh: Vec<f64>,
    /// Accumulated `alpha * |d loss / d alpha|` per voxel; nonnegative.
    pub priority: Vec<f64>,
}

impl GradientStore {
    pub fn zeros(world: &OctreeWorld) -> Self {
        GradientStore {
            d_raw: vec![[0.0; 8]; world.len()],
            d_sh: vec![0.0; world.sh.len()],
            priority: vec![0.0; world.len()],
        }
    }

    pub fn clear(&mut self) {
        for r in self.d_raw.iter_mut() {
            *r = [0.0; 8];
        }
        self.d_sh.fill(0.0);
        self.priority.fill(0.0);
    }

    /// `self += a * other`, including the priority accumulator.
    pub fn axpy(&mut self, a: f64, other: &GradientStore) {
        assert_eq!(self.d_raw.len(), other.d_raw.len());
        assert_eq!(self.d_sh.len(), other.d_sh.len());
        for (dst, src) in self.d_raw.iter_mut().zip(&other.d_raw) {
            for c in 0..8 {
                dst[c] += a * src[c];
            }
        }
        for (dst, src) in self.d_sh.iter_mut().zip(&other.d_sh) {
            *dst += a * src;
        }
        for (dst, src) in self.priority.iter_mut().zip(&other.priority) {
            *dst += a * src;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_raw.iter().flatten().all(|v| v.is_finite())
            && self.d_sh.iter().all(|v| v.is_finite())
            && self.priority.iter().all(|v| v.is_finite())
    }

    /// Flattens to the canonical parameter order (all raw densities
    /// slot-major, then all SH coefficients).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d_raw.len() * 8 + self.d_sh.len());
        for r in &self.d_raw {
            out.extend_from_slice(r);
        }
        out.extend_from_slice(&self.d_sh);
        out
    }
}

/// Number of differentiable parameters (raw densities plus SH coefficients).
pub fn param_count(world: &OctreeWorld) -> usize {
    world.len() * 8 + world.sh.len()
}

/// Reads parameter `idx` in canonical order.
pub fn get_param(world: &OctreeWorld, idx: usize) -> f64 {
    let nraw = world.len() * 8;
    if idx < nraw {
        world.raw_geo[idx / 8][idx % 8]
    } else {
        world.sh[idx - nraw]
    }
}

/// Writes parameter `idx` in canonical order.
pub fn set_param(world: &mut OctreeWorld, idx: usize, v: f64) {
    let nraw = world.len() * 8;
    if idx < nraw {
        world.raw_geo[idx / 8][idx % 8] = v;
    } else {
        world.sh[idx - nraw] = v;
    }
}

/// Per-pixel adjoints for every rendered output. Depth, level, and normal
/// adjoints refer to the opacity-normalized outputs.
#[derive(Clone, Debug)]
pub struct AdjointBuffers {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub level: Vec<f64>,
    pub normal: Vec<Vec3>,
    pub opacity: Vec<f64>,
}

impl AdjointBuffers {
    pub fn zeros(n: usize) -> Self {
        AdjointBuffers {
            color: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            level: vec![0.0; n],
            normal: vec![Vec3::ZERO; n],
            opacity: vec![0.0; n],
        }
    }

    fn pixel_is_zero(&self, px: usize) -> bool {
        self.color[px] == [0.0; 3]
            && self.depth[px] == 0.0
            && self.level[px] == 0.0
            && self.normal[px] == Vec3::ZERO
            && self.opacity[px] == 0.0
    }
}

/// One voxel's gradient contribution from a single pixel.
struct SegGrad {
    slot: u32,
    d_raw: [f64; 8],
    d_sh: [f64; 3 * sh::MAX_COEFFS],
    priority: f64,
    max_w: f64,
}

struct PixelScratch {
    alpha: Vec<f64>,
    w: Vec<f64>,
    t_before: Vec<f64>,
    act: Vec<[f64; 8]>,
}

impl PixelScratch {
    fn new() -> Self {
        PixelScratch {
            alpha: Vec::new(),
            w: Vec::new(),
            t_before: Vec::new(),
            act: Vec::new(),
        }
    }
}

/// Runs a deterministic parallel loop over `n` items: bands are computed in
/// parallel (with a per-thread scratch) and drained sequentially in index
/// order, so any accumulation done by `drain` is order-stable.
pub fn for_items_banded<T, S, FI, FC, FD>(n: usize, band: usize, init: FI, compute: FC, mut drain: FD)
where
    T: Send,
    S: Send,
    FI: Fn() -> S + Sync,
    FC: Fn(&mut S, usize) -> T + Sync,
    FD: FnMut(usize, T),
{
    let band = band.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + band).min(n);
        let results: Vec<T> = (start..end)
            .into_par_iter()
            .map_init(&init, |s, i| compute(s, i))
            .collect();
        for (off, r) in results.into_iter().enumerate() {
            drain(start + off, r);
        }
        start = end;
    }
}

fn backward_pixel(
    world: &OctreeWorld,
    origin: Vec3,
    dir: Vec3,
    recs: &[SegRec],
    opts: &RenderOpts,
    a_color: [f64; 3],
    a_depth: f64,
    a_level: f64,
    a_normal: Vec3,
    a_opacity: f64,
    scratch: &mut PixelScratch,
    out: &mut Vec<SegGrad>,
) {
    let k = opts.k_samples;
    let mut basis = [0.0; sh::MAX_COEFFS];
    sh::eval_basis(world.sh_degree, dir, &mut basis);
    let ncoef = world.coeffs_per_channel();

    // forward replay: per-segment alpha, weight, transmittance-before,
    // and the output accumulators needed for normalization adjoints
    scratch.alpha.clear();
    scratch.w.clear();
    scratch.t_before.clear();
    scratch.act.clear();
    let mut t = 1.0f64;
    let mut depth_acc = 0.0;
    let mut level_acc = 0.0;
    let mut normal_acc = Vec3::ZERO;
    for rec in recs {
        let slot = rec.slot as usize;
        let raw = &world.raw_geo[slot];
        let mut act = [0.0; 8];
        for c in 0..8 {
            act[c] = activate(raw[c]);
        }
        let (vmin, size, _) = world.slot_extent(slot);
        let inv_size = 1.0 / size;
        let q0 = (origin + dir * rec.t0 - vmin) * inv_size;
        let q_step = dir * (rec.dt * inv_size);
        let alpha = if rec.dt > 0.0 {
            crate::render::segment_alpha(&act, q0, q_step, rec.dt, k)
        } else {
            0.0
        };
        let w = t * alpha;
        scratch.alpha.push(alpha);
        scratch.w.push(w);
        scratch.t_before.push(t);
        scratch.act.push(act);
        depth_acc += w * (rec.t0 + 0.5 * rec.dt);
        level_acc += w * world.keys[slot].level as f64;
        if rec.flip != 0.0 {
            if let Some(n) = voxel_normal(&act) {
                normal_acc += n * (w * rec.flip as f64);
            }
        }
        t -= w;
    }
    let opacity = 1.0 - t;

    // adjoints of the raw (unnormalized) accumulators and of the opacity
    let (a_depth_acc, a_level_acc, a_normal_acc, a_opacity_tot) = if opacity > 0.0 {
        let inv_o = 1.0 / opacity;
        let d_out = depth_acc * inv_o;
        let l_out = level_acc * inv_o;
        let n_out = normal_acc * inv_o;
        let from_norm =
            -(a_depth * d_out + a_level * l_out + a_normal.dot(n_out)) * inv_o;
        (
            a_depth * inv_o,
            a_level * inv_o,
            a_normal * inv_o,
            a_opacity + from_norm,
        )
    } else {
        (0.0, 0.0, Vec3::ZERO, a_opacity)
    };

    // reverse sweep with the suffix sum S = sum_{j>i} w_j dL/dw_j
    let mut suffix = 0.0f64;
    for i in (0..recs.len()).rev() {
        let rec = &recs[i];
        let slot = rec.slot as usize;
        let act = &scratch.act[i];
        let alpha = scratch.alpha[i];
        let w = scratch.w[i];
        let t_before = scratch.t_before[i];

        // segment color (SH dot) and normal
        let coeffs = world.sh_of(slot);
        let mut c_seg = [0.0f64; 3];
        for (ch, c) in c_seg.iter_mut().enumerate() {
            for b in 0..ncoef {
                *c += basis[b] * coeffs[ch * ncoef + b];
            }
        }
        let normal = if rec.flip != 0.0 { voxel_normal(act) } else { None };

        // dL/dw_i: background folded into the color term so every output
        // is a pure function of the weights
        let mut a_w = a_opacity_tot;
        for ch in 0..3 {
            a_w += (c_seg[ch] - opts.bg[ch]) * a_color[ch];
        }
        a_w += (rec.t0 + 0.5 * rec.dt) * a_depth_acc;
        a_w += world.keys[slot].level as f64 * a_level_acc;
        if let Some(n) = normal {
            a_w += (n * rec.flip as f64).dot(a_normal_acc);
        }

        // dL/dalpha_i through w_i = T_i alpha_i and all later weights
        let mut a_alpha = t_before * a_w;
        if suffix != 0.0 {
            a_alpha -= suffix / (1.0 - alpha);
        }
        suffix += w * a_w;

        let mut g = SegGrad {
            slot: rec.slot,
            d_raw: [0.0; 8],
            d_sh: [0.0; 3 * sh::MAX_COEFFS],
            priority: alpha * a_alpha.abs(),
            max_w: w,
        };

        // density chain: alpha = 1 - exp(-(dt/K) sum_k rho_k)
        if rec.dt > 0.0 && a_alpha != 0.0 {
            let (vmin, size, _) = world.slot_extent(slot);
            let inv_size = 1.0 / size;
            let q0 = (origin + dir * rec.t0 - vmin) * inv_size;
            let q_step = dir * (rec.dt * inv_size);
            let a_rho = a_alpha * (rec.dt / k as f64) * (1.0 - alpha);
            for s in 0..k {
                let f = (s as f64 + 0.5) / k as f64;
                let q = q0 + q_step * f;
                let wts = crate::grid::tri_weights([
                    q.x.clamp(0.0, 1.0),
                    q.y.clamp(0.0, 1.0),
                    q.z.clamp(0.0, 1.0),
                ]);
                for c in 0..8 {
                    g.d_raw[c] += a_rho * wts[c] * activate_deriv(world.raw_geo[slot][c]);
                }
            }
        }

        // SH chain: c_seg[ch] = sum_b basis_b coeffs[ch,b], weighted by w
        if w != 0.0 {
            for ch in 0..3 {
                let aw = w * a_color[ch];
                if aw != 0.0 {
                    for b in 0..ncoef {
                        g.d_sh[ch * ncoef + b] += aw * basis[b];
                    }
                }
            }
        }

        // normal chain: n = flip * g / |g|, g the center gradient of the
        // activated field; projection removes the radial component
        if let Some(n_unit) = normal {
            let grad = crate::grid::tri_grad(act, [0.5, 0.5, 0.5]);
            let glen = grad.norm();
            if glen > 0.0 {
                let a_n = a_normal_acc * (w * rec.flip as f64);
                let a_g = (a_n - n_unit * n_unit.dot(a_n)) * (1.0 / glen);
                for c in 0..8 {
                    let sx = if c & 1 == 1 { 0.25 } else { -0.25 };
                    let sy = if (c >> 1) & 1 == 1 { 0.25 } else { -0.25 };
                    let sz = if (c >> 2) & 1 == 1 { 0.25 } else { -0.25 };
                    let a_act = sx * a_g.x + sy * a_g.y + sz * a_g.z;
                    g.d_raw[c] += a_act * activate_deriv(world.raw_geo[slot][c]);
                }
            }
        }

        out.push(g);
    }
}

/// Backward pass over a full rendered view. Adjoints in `adj` refer to the
/// outputs of the taped forward render; contributions accumulate into
/// `store` (and optionally a per-voxel max-blend-weight statistic) in
/// deterministic pixel order.
pub fn backward_view(
    world: &OctreeWorld,
    cam: &Camera,
    tape: &Tape,
    opts: &RenderOpts,
    adj: &AdjointBuffers,
    store: &mut GradientStore,
    mut max_w_stats: Option<&mut [f64]>,
) -> Result<()> {
    let n_px = tape.width * tape.height;
    if adj.color.len() != n_px
        || adj.depth.len() != n_px
        || adj.level.len() != n_px
        || adj.normal.len() != n_px
        || adj.opacity.len() != n_px
    {
        return Err(EngineError::Invariant(
            "adjoint buffers do not match tape dimensions".into(),
        ));
    }
    if store.d_raw.len() != world.len() {
        return Err(EngineError::Invariant(
            "gradient store does not match world size".into(),
        ));
    }
    let ncoef3 = world.sh_stride();
    let want_stats = max_w_stats.is_some();
    for_items_banded(
        n_px,
        4096,
        || (PixelScratch::new(), Vec::new()),
        |state: &mut (PixelScratch, Vec<SegGrad>), px| {
            let (scratch, out) = state;
            out.clear();
            if !adj.pixel_is_zero(px) {
                let x = px % tape.width;
                let y = px / tape.width;
                let (origin, dir) = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
                backward_pixel(
                    world,
                    origin,
                    dir,
                    tape.pixel_recs(px),
                    opts,
                    adj.color[px],
                    adj.depth[px],
                    adj.level[px],
                    adj.normal[px],
                    adj.opacity[px],
                    scratch,
                    out,
                );
            } else if want_stats {
                // stats still need the weights of masked pixels
                let x = px % tape.width;
                let y = px / tape.width;
                let (origin, dir) = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
                let mut t = 1.0f64;
                for rec in tape.pixel_recs(px) {
                    let slot = rec.slot as usize;
                    let mut act = [0.0; 8];
                    for c in 0..8 {
                        act[c] = activate(world.raw_geo[slot][c]);
                    }
                    let (vmin, size, _) = world.slot_extent(slot);
                    let q0 = (origin + dir * rec.t0 - vmin) * (1.0 / size);
                    let q_step = dir * (rec.dt / size);
                    let alpha = if rec.dt > 0.0 {
                        crate::render::segment_alpha(&act, q0, q_step, rec.dt, opts.k_samples)
                    } else {
                        0.0
                    };
                    let w = t * alpha;
                    out.push(SegGrad {
                        slot: rec.slot,
                        d_raw: [0.0; 8],
                        d_sh: [0.0; 3 * sh::MAX_COEFFS],
                        priority: 0.0,
                        max_w: w,
                    });
                    t -= w;
                }
            }
            std::mem::take(out)
        },
        |_px, grads| {
            for g in &grads {
                let slot = g.slot as usize;
                for c in 0..8 {
                    store.d_raw[slot][c] += g.d_raw[c];
                }
                let base = slot * ncoef3;
                for b in 0..ncoef3 {
                    store.d_sh[base + b] += g.d_sh[b];
                }
                store.priority[slot] += g.priority;
                if let Some(stats) = max_w_stats.as_deref_mut() {
                    if g.max_w > stats[slot] {
                        stats[slot] = g.max_w;
                    }
                }
            }
        },
    );
    Ok(())
}

/// Central-difference gradient of an arbitrary deterministic scalar loss
/// over every parameter, in canonical order. Parameters perturb in
/// parallel over per-thread world clones.
pub fn fd_oracle<F>(world: &OctreeWorld, eps: f64, loss: &F) -> Result<Vec<f64>>
where
    F: Fn(&OctreeWorld) -> f64 + Sync,
{
    assert!(eps > 0.0);
    let base_a = loss(world);
    let base_b = loss(world);
    if base_a.to_bits() != base_b.to_bits() {
        return Err(EngineError::Numeric(
            "finite-difference oracle requires a deterministic loss".into(),
        ));
    }
    let n = param_count(world);
    let grads: Vec<f64> = (0..n)
        .into_par_iter()
        .map_init(
            || world.clone(),
            |w, idx| {
                let v0 = get_param(w, idx);
                set_param(w, idx, v0 + eps);
                let lp = loss(w);
                set_param(w, idx, v0 - eps);
                let lm = loss(w);
                set_param(w, idx, v0);
                (lp - lm) / (2.0 * eps)
            },
        )
        .collect();
    Ok(grads)
}

/// Result of comparing analytic and numeric gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCompare {
    pub n: usize,
    pub n_fail: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub worst_idx: usize,
}

/// Relative comparison with an absolute floor: a parameter passes when
/// `|a - f| <= max(rel_tol * max(|a|, |f|), abs_floor)`.
pub fn compare_grads(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_floor: f64) -> GradCompare {
    assert_eq!(analytic.len(), numeric.len());
    let mut r = GradCompare {
        n: analytic.len(),
        ..Default::default()
    };
    let mut sum_rel = 0.0;
    for (i, (&a, &f)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(f.abs());
        let diff = (a - f).abs();
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        sum_rel += rel;
        if rel > r.max_rel {
            r.max_rel = rel;
            r.worst_idx = i;
        }
        if diff > (rel_tol * scale).max(abs_floor) {
            r.n_fail += 1;
        }
    }
    r.mean_rel = if r.n == 0 { 0.0 } else { sum_rel / r.n as f64 };
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{inv_activate, VoxelKey};
    use crate::render::{render_view_taped, composite_from_tape};

    fn test_world(voxels: Vec<(VoxelKey, [f64; 8])>, seed: u64) -> OctreeWorld {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vox = voxels
            .into_iter()
            .map(|(k, r)| {
                let mut coeffs = vec![0.0; 12];
                for c in coeffs.iter_mut() {
                    *c = rng.gen_range(-0.5..1.5);
                }
                (k, r, coeffs)
            })
            .collect();
        OctreeWorld::from_voxels(1.0, Vec3::ZERO, 8, 1, vox).unwrap()
    }

    fn test_cam(w: u32, h: u32) -> Camera {
        Camera::look_at(
            v3(0.35, -2.3, 0.55),
            Vec3::ZERO,
            v3(0.0, 0.0, 1.0),
            1.6 * w as f64,
            1.6 * h as f64,
            w,
            h,
        )
    }

    // fixed per-pixel output weights making a linear scalar loss over all
    // rendered outputs
    fn linear_adj(n_px: usize, seed: u64) -> AdjointBuffers {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut adj = AdjointBuffers::zeros(n_px);
        for p in 0..n_px {
            for ch in 0..3 {
                adj.color[p][ch] = rng.gen_range(-1.0..1.0);
            }
            adj.depth[p] = rng.gen_range(-1.0..1.0);
            adj.level[p] = rng.gen_range(-0.5..0.5);
            adj.normal[p] = v3(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            adj.opacity[p] = rng.gen_range(-1.0..1.0);
        }
        adj
    }

    fn loss_of(out: &crate::render::PixelOut, adj: &AdjointBuffers, px: usize) -> f64 {
        let mut l = 0.0;
        for ch in 0..3 {
            l += adj.color[px][ch] * out.color[ch];
        }
        l += adj.depth[px] * out.depth;
        l += adj.level[px] * out.level;
        l += adj.normal[px].dot(out.normal);
        l += adj.opacity[px] * out.opacity;
        l
    }

    #[test]
    fn zero_adjoints_zero_gradients() {
        let w = test_world(
            vec![(VoxelKey { level: 0, i: 0, j: 0, k: 0 }, [0.4; 8])],
            3,
        );
        let cam = test_cam(6, 6);
        let opts = RenderOpts::default();
        let (_, tape) = render_view_taped(&w, &cam, &opts, None);
        let adj = AdjointBuffers::zeros(36);
        let mut store = GradientStore::zeros(&w);
        backward_view(&w, &cam, &tape, &opts, &adj, &mut store, None).unwrap();
        assert!(store.flatten().iter().all(|&v| v == 0.0));
        assert!(store.priority.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_alpha_gradient_matches_fd() {
        // scalar loss: rendered opacity at the central pixel
        let w = test_world(
            vec![(VoxelKey { level: 0, i: 0, j: 0, k: 0 }, [
                0.3, -0.2, 0.8, 0.1, -0.5, 0.6, 0.0, 0.9,
            ])],
            5,
        );
        let cam = test_cam(3, 3);
        let opts = RenderOpts { t_floor: 0.0, ..RenderOpts::default() };
        let (_, tape) = render_view_taped(&w, &cam, &opts, None);
        let px = 4; // center of 3x3
        let mut adj = AdjointBuffers::zeros(9);
        adj.opacity[px] = 1.0;
        let mut store = GradientStore::zeros(&w);
        backward_view(&w, &cam, &tape, &opts, &adj, &mut store, None).unwrap();

        let cam2 = cam.clone();
        let tape2 = tape.clone();
        let loss = move |wd: &OctreeWorld| {
            composite_from_tape(wd, &cam2, 1, 1, tape2.pixel_recs(px), &opts).opacity
        };
        let fd = fd_oracle(&w, 1e-4, &loss).unwrap();
        let an = store.flatten();
        let cmp = compare_grads(&an[..8], &fd[..8], 1e-5, 1e-12);
        assert_eq!(cmp.n_fail, 0, "max rel err {}", cmp.max_rel);
        assert!(an[..8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn untouched_parameter_gradient_is_zero() {
        // second voxel off to the side; rays through the center pixel of a
        // 1x1 image never cross it
        let w = test_world(
            vec![
                (VoxelKey { level: 1, i: 0, j: 0, k: 0 }, [0.5; 8]),
                (VoxelKey { level: 1, i: 1, j: 1, k: 1 }, [0.5; 8]),
            ],
            7,
        );
        let cam = Camera::look_at(
            v3(-0.25, -2.0, -0.25),
            v3(-0.25, 0.0, -0.25),
            v3(0.0, 0.0, 1.0),
            400.0,
            400.0,
            1,
            1,
        );
        let opts = RenderOpts { t_floor: 0.0, ..RenderOpts::default() };
        let (buf, tape) = render_view_taped(&w, &cam, &opts, None);
        assert!(buf.opacity(0) > 0.0);
        let mut adj = AdjointBuffers::zeros(1);
        adj.color[0] = [1.0, -0.5, 0.25];
        adj.depth[0] = 0.7;
        let mut store = GradientStore::zeros(&w);
        backward_view(&w, &cam, &tape, &opts, &adj, &mut store, None).unwrap();
        assert!(store.d_raw[1].iter().all(|&v| v == 0.0));
        let stride = w.sh_stride();
        assert!(store.d_sh[stride..].iter().all(|&v| v == 0.0));

        let cam2 = cam.clone();
        let adj2 = adj.clone();
        let tape2 = tape.clone();
        let loss = move |wd: &OctreeWorld| {
            let out = composite_from_tape(wd, &cam2, 0, 0, tape2.pixel_recs(0), &opts);
            loss_of(&out, &adj2, 0)
        };
        let fd = fd_oracle(&w, 1e-4, &loss).unwrap();
        for &g in &fd[8..16] {
            assert!(g.abs() < 1e-10);
        }
    }

    #[test]
    fn full_outputs_gradient_matches_fd_multi_voxel() {
        let mut voxels = Vec::new();
        for (n, key) in [
            VoxelKey { level: 1, i: 0, j: 0, k: 0 },
            VoxelKey { level: 1, i: 1, j: 0, k: 0 },
            VoxelKey { level: 1, i: 0, j: 1, k: 1 },
            VoxelKey { level: 2, i: 2, j: 2, k: 0 },
        ]
        .into_iter()
        .enumerate()
        {
            let mut raw = [0.0; 8];
            for (c, r) in raw.iter_mut().enumerate() {
                *r = inv_activate(0.4 + 0.25 * n as f64 + 0.1 * c as f64);
            }
            voxels.push((key, raw));
        }
        let w = test_world(voxels, 11);
        let cam = test_cam(8, 8);
        let opts = RenderOpts { t_floor: 0.0, ..RenderOpts::default() };
        let (buf, tape) = render_view_taped(&w, &cam, &opts, None);
        let n_px = 64;
        let adj = linear_adj(n_px, 13);

        let mut store = GradientStore::zeros(&w);
        backward_view(&w, &cam, &tape, &opts, &adj, &mut store, None).unwrap();

        let cam2 = cam.clone();
        let tape2 = tape.clone();
        let adj2 = adj.clone();
        let loss = move |wd: &OctreeWorld| {
            let mut l = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    let px = y * 8 + x;
                    let out = composite_from_tape(wd, &cam2, x, y, tape2.pixel_recs(px), &opts);
                    l += loss_of(&out, &adj2, px);
                }
            }
            l
        };
        // sanity: the taped loss at the base point equals the live outputs
        let mut live = 0.0;
        for px in 0..n_px {
            let out = crate::render::PixelOut {
                color: buf.color[px],
                depth: buf.depth[px],
                level: buf.level[px],
                normal: buf.normal[px],
                opacity: buf.opacity(px),
                t_fin: buf.t_fin[px],
                hit: buf.hit[px],
            };
            live += loss_of(&out, &adj, px);
        }
        assert!((loss(&w) - live).abs() < 1e-12);

        let fd = fd_oracle(&w, 1e-4, &loss).unwrap();
        let an = store.flatten();
        let cmp = compare_grads(&an, &fd, 1e-4, 1e-8);
        assert_eq!(
            cmp.n_fail, 0,
            "{} of {} params fail, max rel {} at {}",
            cmp.n_fail, cmp.n, cmp.max_rel, cmp.worst_idx
        );
    }

    #[test]
    fn priority_nonnegative_and_positive_on_hit() {
        let w = test_world(
            vec![(VoxelKey { level: 0, i: 0, j: 0, k: 0 }, [1.0; 8])],
            17,
        );
        let cam = test_cam(4, 4);
        let opts = RenderOpts::default();
        let (_, tape) = render_view_taped(&w, &cam, &opts, None);
        let mut adj = AdjointBuffers::zeros(16);
        for p in 0..16 {
            adj.color[p] = [0.5, 0.5, 0.5];
        }
        let mut store = GradientStore::zeros(&w);
        backward_view(&w, &cam, &tape, &opts, &adj, &mut store, None).unwrap();
        assert!(store.priority[0] > 0.0);
    }

    #[test]
    fn axpy_combination_is_elementwise() {
        let w = test_world(
            vec![(VoxelKey { level: 0, i: 0, j: 0, k: 0 }, [0.2; 8])],
            19,
        );
        let cam = test_cam(4, 4);
        let opts = RenderOpts::default();
        let (_, tape) = render_view_taped(&w, &cam, &opts, None);
        let adj_a = linear_adj(16, 23);
        let mut adj_b = AdjointBuffers::zeros(16);
        for p in 0..16 {
            adj_b.depth[p] = 0.3 + p as f64 * 0.01;
        }
        let mut sa = GradientStore::zeros(&w);
        let mut sb = GradientStore::zeros(&w);
        backward_view(&w, &cam, &tape, &opts, &adj_a, &mut sa, None).unwrap();
        backward_view(&w, &cam, &tape, &opts, &adj_b, &mut sb, None).unwrap();
        let eta = 0.37;
        let mut combined = GradientStore::zeros(&w);
        combined.axpy(1.0, &sa);
        combined.axpy(eta, &sb);
        let fa = sa.flatten();
        let fb = sb.flatten();
        let fc = combined.flatten();
        for i in 0..fc.len() {
            assert_eq!(fc[i], fa[i] + eta * fb[i]);
        }
        // priorities combine the same way
        assert_eq!(combined.priority[0], sa.priority[0] + eta * sb.priority[0]);
    }

    #[test]
    fn backward_scaling_is_exact_for_power_of_two() {
        // doubling every adjoint doubles every gradient bitwise (scaling by
        // a power of two commutes with rounding)
        let w = test_world(
            vec![
                (VoxelKey { level: 1, i: 0, j: 0, k: 0 }, [0.7; 8]),
                (VoxelKey { level: 1, i: 1, j: 0, k: 1 }, [-0.2; 8]),
            ],
            29,
        );
        let cam = test_cam(5, 5);
        let opts = RenderOpts::default();
        let (_, tape) = render_view_taped(&w, &cam, &opts, None);
        let adj1 = linear_adj(25, 31);
        let mut adj2 = AdjointBuffers::zeros(25);
        for p in 0..25 {
            for ch in 0..3 {
                adj2.color[p][ch] = 2.0 * adj1.color[p][ch];
            }
            adj2.depth[p] = 2.0 * adj1.depth[p];
            adj2.level[p] = 2.0 * adj1.level[p];
            adj2.normal[p] = adj1.normal[p] * 2.0;
            adj2.opacity[p] = 2.0 * adj1.opacity[p];
        }
        let mut s1 = GradientStore::zeros(&w);
        let mut s2 = GradientStore::zeros(&w);
        backward_view(&w, &cam, &tape, &opts, &adj1, &mut s1, None).unwrap();
        backward_view(&w, &cam, &tape, &opts, &adj2, &mut s2, None).unwrap();
        let f1 = s1.flatten();
        let f2 = s2.flatten();
        for i in 0..f1.len() {
            assert_eq!(2.0 * f1[i], f2[i]);
        }
    }

    #[test]
    fn quadratic_loss_fd_is_exact() {
        let w = test_world(
            vec![(VoxelKey { level: 0, i: 0, j: 0, k: 0 }, [0.6; 8])],
            37,
        );
        let loss = |wd: &OctreeWorld| wd.raw_geo[0][3] * wd.raw_geo[0][3];
        let fd = fd_oracle(&w, 1e-4, &loss).unwrap();
        assert!((fd[3] - 2.0 * 0.6).abs() < 1e-9);
        for (i, &g) in fd.iter().enumerate() {
            if i != 3 {
                assert!(g.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn max_weight_stats_recorded() {
        let w = test_world(
            vec![(VoxelKey { level: 0, i: 0, j: 0, k: 0 }, [3.0; 8])],
            41,
        );
        let cam = test_cam(4, 4);
        let opts = RenderOpts::default();
        let (_, tape) = render_view_taped(&w, &cam, &opts, None);
        let adj = AdjointBuffers::zeros(16);
        let mut store = GradientStore::zeros(&w);
        let mut stats = vec![0.0; w.len()];
        backward_view(&w, &cam, &tape, &opts, &adj, &mut store, Some(&mut stats)).unwrap();
        assert!(stats[0] > 0.9, "opaque voxel should have near-1 max weight");
    }
}
