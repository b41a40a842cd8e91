//! Forward rendering: exact ray-octree traversal and front-to-back alpha
//! compositing of color, depth, normal, and octree-level maps.
//!
//! Design notes:
//! - Per-voxel opacity integrates the activated trilinear density with a
//!   K-point midpoint rule over the ray segment inside the voxel.
//! - Compositing uses the recurrence `T_next = T - w`, which conserves
//!   weights exactly: the segment weights and the final transmittance sum
//!   to 1 in double precision.
//! - Depth, level, and normal maps are weight-normalized by the pixel
//!   opacity, so a fully covered pixel reports the convex combination of
//!   per-segment values.
//! - Every composited segment is recorded on a tape (voxel slot, entry,
//!   length, frozen normal-orientation sign). The backward pass and the
//!   finite-difference oracle replay the tape, so the objective being
//!   differentiated is exactly the one evaluated by the live render.

use crate::camera::Camera;
use crate::grid::{activate, tri_grad, tri_interp, tri_weights, OctreeWorld};
use crate::math::{v3, Vec3};
use crate::sh;
use rayon::prelude::*;

/// Rendering options shared by the forward and backward passes.
#[derive(Clone, Copy, Debug)]
pub struct RenderOpts {
    /// Midpoint samples per ray segment.
    pub k_samples: usize,
    /// Early-termination transmittance floor (0 disables early stop).
    pub t_floor: f64,
    /// Background color composited with residual transmittance.
    pub bg: [f64; 3],
    /// Opacity threshold for the hit mask.
    pub hit_thresh: f64,
}

impl Default for RenderOpts {
    fn default() -> Self {
        RenderOpts {
            k_samples: 3,
            t_floor: 1e-4,
            bg: [0.0; 3],
            hit_thresh: 0.5,
        }
    }
}

/// One composited ray segment: the tape record replayed by the backward
/// pass. `flip` is the frozen camera-facing sign of the voxel normal
/// (0 marks a degenerate normal, excluded from normal compositing).
#[derive(Clone, Copy, Debug)]
pub struct SegRec {
    pub slot: u32,
    pub t0: f64,
    pub dt: f64,
    pub flip: f32,
}

/// Composited per-pixel outputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelOut {
    pub color: [f64; 3],
    /// Opacity-normalized mean segment-midpoint distance (0 when nothing hit).
    pub depth: f64,
    /// Opacity-normalized mean octree level (0 when nothing hit).
    pub level: f64,
    /// Opacity-normalized composite of camera-facing voxel normals.
    pub normal: Vec3,
    pub opacity: f64,
    pub t_fin: f64,
    pub hit: bool,
}

/// Full-image render outputs, row-major.
#[derive(Clone, Debug)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub level: Vec<f64>,
    pub normal: Vec<Vec3>,
    pub t_fin: Vec<f64>,
    pub hit: Vec<bool>,
}

impl RenderBuffers {
    fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        RenderBuffers {
            width,
            height,
            color: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            level: vec![0.0; n],
            normal: vec![Vec3::ZERO; n],
            t_fin: vec![1.0; n],
            hit: vec![false; n],
        }
    }

    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn opacity(&self, px: usize) -> f64 {
        1.0 - self.t_fin[px]
    }

    fn set(&mut self, px: usize, out: &PixelOut) {
        self.color[px] = out.color;
        self.depth[px] = out.depth;
        self.level[px] = out.level;
        self.normal[px] = out.normal;
        self.t_fin[px] = out.t_fin;
        self.hit[px] = out.hit;
    }
}

/// Tape of all composited segments of a render, per pixel.
#[derive(Clone, Debug)]
pub struct Tape {
    pub recs: Vec<SegRec>,
    /// Per-pixel `(start, len)` into `recs`, row-major.
    pub ranges: Vec<(u32, u32)>,
    pub width: usize,
    pub height: usize,
}

impl Tape {
    pub fn pixel_recs(&self, px: usize) -> &[SegRec] {
        let (s, l) = self.ranges[px];
        &self.recs[s as usize..(s + l) as usize]
    }
}

fn slab(bmin: Vec3, size: f64, origin: Vec3, inv: Vec3) -> (f64, f64) {
    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for a in 0..3 {
        let t1 = (bmin.axis(a) - origin.axis(a)) * inv.axis(a);
        let t2 = (bmin.axis(a) + size - origin.axis(a)) * inv.axis(a);
        // f64::min/max drop a NaN operand, which handles rays that start on
        // a face they run parallel to
        t_lo = t_lo.max(t1.min(t2));
        t_hi = t_hi.min(t1.max(t2));
    }
    (t_lo, t_hi)
}

fn traverse_rec(
    world: &OctreeWorld,
    entry: i32,
    bmin: Vec3,
    size: f64,
    origin: Vec3,
    inv: Vec3,
    t_lo: f64,
    t_hi: f64,
    subset: Option<&[bool]>,
    out: &mut Vec<SegRec>,
) {
    if entry == 0 {
        return;
    }
    if entry < 0 {
        let slot = (-entry - 1) as u32;
        if let Some(mask) = subset {
            if !mask[slot as usize] {
                return;
            }
        }
        out.push(SegRec {
            slot,
            t0: t_lo,
            dt: t_hi - t_lo,
            flip: 0.0,
        });
        return;
    }
    let node = world.accel().nodes[(entry - 1) as usize];
    let half = 0.5 * size;
    // clipped child intervals, insertion-sorted by entry then octant
    let mut cand: [(f64, f64, u8); 8] = [(0.0, 0.0, 0); 8];
    let mut n = 0;
    for oct in 0..8u8 {
        if node[oct as usize] == 0 {
            continue;
        }
        let cmin = bmin
            + v3(
                (oct & 1) as f64,
                ((oct >> 1) & 1) as f64,
                ((oct >> 2) & 1) as f64,
            ) * half;
        let (s0, s1) = slab(cmin, half, origin, inv);
        let c0 = s0.max(t_lo);
        let c1 = s1.min(t_hi);
        if c1 > c0 {
            let mut i = n;
            while i > 0 && cand[i - 1].0 > c0 {
                cand[i] = cand[i - 1];
                i -= 1;
            }
            cand[i] = (c0, c1, oct);
            n += 1;
        }
    }
    for &(c0, c1, oct) in cand.iter().take(n) {
        let cmin = bmin
            + v3(
                (oct & 1) as f64,
                ((oct >> 1) & 1) as f64,
                ((oct >> 2) & 1) as f64,
            ) * half;
        traverse_rec(
            world,
            node[oct as usize],
            cmin,
            half,
            origin,
            inv,
            c0,
            c1,
            subset,
            out,
        );
    }
}

/// Collects the ordered, positive-length ray segments through all active
/// voxels (optionally restricted to a subset mask). Entry parameters are
/// clamped to `t >= 0`, so an origin inside the world starts at the origin.
pub fn traverse(
    world: &OctreeWorld,
    origin: Vec3,
    dir: Vec3,
    subset: Option<&[bool]>,
    out: &mut Vec<SegRec>,
) {
    out.clear();
    if world.is_empty() {
        return;
    }
    let inv = v3(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
    let root_min = world.world_min();
    let (t0, t1) = slab(root_min, world.world_size, origin, inv);
    let t0 = t0.max(0.0);
    if t1 <= t0 {
        return;
    }
    traverse_rec(
        world,
        world.accel().root,
        root_min,
        world.world_size,
        origin,
        inv,
        t0,
        t1,
        subset,
        out,
    );
}

/// Opacity of one segment: midpoint-rule optical depth of the activated
/// trilinear density, `alpha = 1 - exp(-(dt/K) * sum_k density(q_k))`.
/// `q0` is the local entry point, `q_step` the local entry-to-exit step.
pub fn segment_alpha(act: &[f64; 8], q0: Vec3, q_step: Vec3, dt: f64, k: usize) -> f64 {
    let mut sum = 0.0;
    for s in 0..k {
        let f = (s as f64 + 0.5) / k as f64;
        let q = q0 + q_step * f;
        sum += tri_interp(act, [q.x.clamp(0.0, 1.0), q.y.clamp(0.0, 1.0), q.z.clamp(0.0, 1.0)]);
    }
    -(-(dt / k as f64) * sum).exp_m1()
}

/// Unsigned unit normal of a voxel: the analytic gradient of the activated
/// trilinear field at the voxel center (direction is unaffected by the
/// 1/size world scaling). `None` when the gradient vanishes.
pub fn voxel_normal(act: &[f64; 8]) -> Option<Vec3> {
    tri_grad(act, [0.5, 0.5, 0.5]).try_normalized()
}

/// How segment normal-orientation signs are chosen during compositing.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum FlipMode {
    /// Compute camera-facing signs from current densities, record them into
    /// the segment records, and apply early termination.
    Live,
    /// Reuse recorded signs and composite every given segment (tape replay,
    /// possibly under a perturbed world).
    Frozen,
}

/// Front-to-back composite of prepared segments along one ray.
///
/// Returns the outputs and the number of segments composited; in `Live`
/// mode early termination can stop before the end and callers truncate
/// the tape to that count. Replaying the truncated tape in `Frozen` mode
/// on the same world reproduces the outputs bitwise.
pub fn composite_ray(
    world: &OctreeWorld,
    origin: Vec3,
    dir: Vec3,
    segs: &mut [SegRec],
    opts: &RenderOpts,
    mode: FlipMode,
) -> (PixelOut, usize) {
    let mut basis = [0.0; sh::MAX_COEFFS];
    sh::eval_basis(world.sh_degree, dir, &mut basis);
    let ncoef = world.coeffs_per_channel();

    let mut t = 1.0f64;
    let mut color = [0.0f64; 3];
    let mut depth_acc = 0.0f64;
    let mut level_acc = 0.0f64;
    let mut normal_acc = Vec3::ZERO;
    let mut used = 0usize;

    for rec in segs.iter_mut() {
        used += 1;
        if rec.dt <= 0.0 {
            continue;
        }
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
        let alpha = segment_alpha(&act, q0, q_step, rec.dt, opts.k_samples);
        let w = t * alpha;

        let coeffs = world.sh_of(slot);
        for (ch, c) in color.iter_mut().enumerate() {
            let mut v = 0.0;
            for b in 0..ncoef {
                v += basis[b] * coeffs[ch * ncoef + b];
            }
            *c += w * v;
        }
        let t_mid = rec.t0 + 0.5 * rec.dt;
        depth_acc += w * t_mid;
        level_acc += w * world.keys[slot].level as f64;

        if matches!(mode, FlipMode::Live) {
            rec.flip = match voxel_normal(&act) {
                Some(n) => {
                    let d = n.dot(dir);
                    if d > 0.0 {
                        -1.0
                    } else {
                        1.0
                    }
                }
                None => 0.0,
            };
        }
        if rec.flip != 0.0 {
            if let Some(n) = voxel_normal(&act) {
                normal_acc += n * (w * rec.flip as f64);
            }
        }

        t -= w;
        if matches!(mode, FlipMode::Live) && t < opts.t_floor {
            break;
        }
    }

    let opacity = 1.0 - t;
    for (ch, c) in color.iter_mut().enumerate() {
        *c += t * opts.bg[ch];
    }
    let (depth, level, normal) = if opacity > 0.0 {
        (
            depth_acc / opacity,
            level_acc / opacity,
            normal_acc / opacity,
        )
    } else {
        (0.0, 0.0, Vec3::ZERO)
    };
    (
        PixelOut {
            color,
            depth,
            level,
            normal,
            opacity,
            t_fin: t,
            hit: opacity > opts.hit_thresh,
        },
        used,
    )
}

/// Replays a pixel's tape under the current (possibly perturbed) world
/// state, with frozen segment geometry and normal signs.
pub fn composite_from_tape(
    world: &OctreeWorld,
    cam: &Camera,
    x: usize,
    y: usize,
    recs: &[SegRec],
    opts: &RenderOpts,
) -> PixelOut {
    let (origin, dir) = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
    let mut segs: Vec<SegRec> = recs.to_vec();
    composite_ray(world, origin, dir, &mut segs, opts, FlipMode::Frozen).0
}

/// Renders one pixel live: traversal plus composite. The scratch vector is
/// truncated to the composited segment count on return.
pub fn render_pixel(
    world: &OctreeWorld,
    cam: &Camera,
    x: usize,
    y: usize,
    opts: &RenderOpts,
    subset: Option<&[bool]>,
    scratch: &mut Vec<SegRec>,
) -> PixelOut {
    let (origin, dir) = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
    traverse(world, origin, dir, subset, scratch);
    let (out, used) = composite_ray(world, origin, dir, scratch, opts, FlipMode::Live);
    scratch.truncate(used);
    out
}

fn render_rows(
    world: &OctreeWorld,
    cam: &Camera,
    opts: &RenderOpts,
    subset: Option<&[bool]>,
    want_tape: bool,
) -> (RenderBuffers, Option<Tape>) {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let rows: Vec<(Vec<PixelOut>, Vec<SegRec>, Vec<u32>)> = (0..h)
        .into_par_iter()
        .map_init(Vec::new, |scratch, y| {
            let mut outs = Vec::with_capacity(w);
            let mut recs = Vec::new();
            let mut lens = Vec::with_capacity(w);
            for x in 0..w {
                let out = render_pixel(world, cam, x, y, opts, subset, scratch);
                outs.push(out);
                if want_tape {
                    recs.extend_from_slice(scratch);
                    lens.push(scratch.len() as u32);
                }
            }
            (outs, recs, lens)
        })
        .collect();

    let mut buf = RenderBuffers::new(w, h);
    let mut tape = want_tape.then(|| Tape {
        recs: Vec::new(),
        ranges: Vec::with_capacity(w * h),
        width: w,
        height: h,
    });
    for (y, (outs, recs, lens)) in rows.into_iter().enumerate() {
        for (x, out) in outs.iter().enumerate() {
            buf.set(y * w + x, out);
        }
        if let Some(tape) = tape.as_mut() {
            let mut start = tape.recs.len() as u32;
            for len in lens {
                tape.ranges.push((start, len));
                start += len;
            }
            tape.recs.extend_from_slice(&recs);
        }
    }
    (buf, tape)
}

/// Renders a full view (optionally restricted to a voxel subset).
pub fn render_view(
    world: &OctreeWorld,
    cam: &Camera,
    opts: &RenderOpts,
    subset: Option<&[bool]>,
) -> RenderBuffers {
    render_rows(world, cam, opts, subset, false).0
}

/// Renders a full view and records the segment tape for the backward pass.
pub fn render_view_taped(
    world: &OctreeWorld,
    cam: &Camera,
    opts: &RenderOpts,
    subset: Option<&[bool]>,
) -> (RenderBuffers, Tape) {
    let (buf, tape) = render_rows(world, cam, opts, subset, true);
    (buf, tape.expect("tape requested"))
}

/// Reusable trilinear corner weights of the K midpoint samples, shared by
/// the backward pass.
pub fn sample_weights(q0: Vec3, q_step: Vec3, k: usize, out: &mut Vec<[f64; 8]>) {
    out.clear();
    for s in 0..k {
        let f = (s as f64 + 0.5) / k as f64;
        let q = q0 + q_step * f;
        out.push(tri_weights([
            q.x.clamp(0.0, 1.0),
            q.y.clamp(0.0, 1.0),
            q.z.clamp(0.0, 1.0),
        ]));
    }
}
