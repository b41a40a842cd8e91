//! Voxel-level surface regularizers.
//!
//! Surface rectification: a voxel the surface passes through should be
//! nearly empty where the ray enters and nearly solid where it leaves.
//! "Surface voxels" are those whose full-segment boundary alphas straddle
//! the threshold (entry below, exit above, strictly); the penalty pushes
//! entry density down and exit density up, weighted by the segment's
//! blending weight.
//!
//! Scaling penalty: density occupying a sampling interval much longer than
//! the smallest active voxel is charged proportionally to the log of that
//! excess, discouraging coarse voxels from carrying surface mass.
//!
//! Gradient semantics: blending weights, surface flags, segment lengths,
//! entry/exit positions, and the minimum voxel size are all frozen into a
//! [`RecSpPlan`] when the plan is built; gradients flow only through the
//! interpolated densities. `eval_rec`/`eval_sp` recompute exactly that
//! frozen objective from a (possibly perturbed) world, so finite
//! differences certify `backward_recsp` directly.

use crate::camera::Camera;
use crate::grid::{self, OctreeWorld};
use crate::grad::GradientStore;
use crate::math::Vec3;
use crate::render::{self, RenderOpts, Tape};

/// One ray segment's frozen contribution data.
#[derive(Clone, Debug)]
pub struct RecSpRecord {
    pub slot: u32,
    /// Entry and exit points in the voxel's local unit cube.
    pub q_entry: Vec3,
    pub q_exit: Vec3,
    /// Blending weight at plan time (detached).
    pub weight: f64,
    /// Boundary alphas at plan time (diagnostic; selection already applied).
    pub alpha_entry: f64,
    pub alpha_exit: f64,
    /// Whether the rectification term applies.
    pub surface: bool,
    /// Frozen `max(0, log2(dt / min_voxel_size))`.
    pub log_excess: f64,
}

/// Frozen per-iteration state of both regularizers.
#[derive(Clone, Debug, Default)]
pub struct RecSpPlan {
    pub records: Vec<RecSpRecord>,
    pub min_voxel_size: f64,
}

/// Density (activated, trilinear) at local coordinates `q` of a voxel.
pub fn density_at(world: &OctreeWorld, slot: usize, q: Vec3) -> f64 {
    let raw = &world.raw_geo[slot];
    let tw = grid::tri_weights([
        q.x.clamp(0.0, 1.0),
        q.y.clamp(0.0, 1.0),
        q.z.clamp(0.0, 1.0),
    ]);
    let mut out = 0.0;
    for c in 0..8 {
        out += tw[c] * grid::activate(raw[c]);
    }
    out
}

/// Alphas over the full segment length at the entry and exit points:
/// `1 - exp(-dt * density(q))`.
pub fn boundary_alphas(
    world: &OctreeWorld,
    slot: usize,
    q_entry: Vec3,
    q_exit: Vec3,
    dt: f64,
) -> (f64, f64) {
    let a = -(-dt * density_at(world, slot, q_entry)).exp_m1();
    let b = -(-dt * density_at(world, slot, q_exit)).exp_m1();
    (a, b)
}

/// The strict surface test: entry alpha below, exit alpha above.
pub fn is_surface(alpha_entry: f64, alpha_exit: f64, t_alpha: f64) -> bool {
    alpha_entry < t_alpha && t_alpha < alpha_exit
}

/// Replays a taped view and freezes every segment's weight, boundary
/// alphas, surface flag, and scaling excess.
pub fn plan_recsp(
    world: &OctreeWorld,
    cam: &Camera,
    tape: &Tape,
    opts: &RenderOpts,
    t_alpha: f64,
) -> RecSpPlan {
    let min_vs = match world.min_voxel_size() {
        Some(v) => v,
        None => return RecSpPlan::default(),
    };
    let mut records = Vec::new();
    for py in 0..tape.height {
        for px in 0..tape.width {
            let i = py * tape.width + px;
            let segs = tape.pixel_recs(i);
            if segs.is_empty() {
                continue;
            }
            let (origin, dir) = cam.ray(px as f64 + 0.5, py as f64 + 0.5);
            let mut transmittance = 1.0;
            for seg in segs {
                let slot = seg.slot as usize;
                let (bmin, size, _) = world.slot_extent(slot);
                let inv = 1.0 / size;
                let q_entry = (origin + dir * seg.t0 - bmin) * inv;
                let q_exit = (origin + dir * (seg.t0 + seg.dt) - bmin) * inv;
                let raw = &world.raw_geo[slot];
                let mut act = [0.0; 8];
                for c in 0..8 {
                    act[c] = grid::activate(raw[c]);
                }
                let alpha = render::segment_alpha(
                    &act,
                    q_entry,
                    q_exit - q_entry,
                    seg.dt,
                    opts.k_samples,
                );
                let weight = transmittance * alpha;
                transmittance -= weight;
                let (a_e, a_o) = boundary_alphas(world, slot, q_entry, q_exit, seg.dt);
                records.push(RecSpRecord {
                    slot: seg.slot,
                    q_entry,
                    q_exit,
                    weight,
                    alpha_entry: a_e,
                    alpha_exit: a_o,
                    surface: is_surface(a_e, a_o, t_alpha),
                    log_excess: (seg.dt / min_vs).log2().max(0.0),
                });
            }
        }
    }
    RecSpPlan {
        records,
        min_voxel_size: min_vs,
    }
}

/// Rectification penalty: sum over surface records of
/// `weight * (density(entry) - density(exit))`.
pub fn eval_rec(plan: &RecSpPlan, world: &OctreeWorld) -> f64 {
    let mut total = 0.0;
    for rec in &plan.records {
        if !rec.surface {
            continue;
        }
        let slot = rec.slot as usize;
        total += rec.weight
            * (density_at(world, slot, rec.q_entry) - density_at(world, slot, rec.q_exit));
    }
    total
}

/// Scaling penalty: sum over all records of
/// `weight * density(center) * max(0, log2(dt / min_voxel_size))`.
pub fn eval_sp(plan: &RecSpPlan, world: &OctreeWorld) -> f64 {
    let center = Vec3 {
        x: 0.5,
        y: 0.5,
        z: 0.5,
    };
    let mut total = 0.0;
    for rec in &plan.records {
        if rec.log_excess == 0.0 || rec.weight == 0.0 {
            continue;
        }
        total += rec.weight * rec.log_excess * density_at(world, rec.slot as usize, center);
    }
    total
}

fn add_density_grad(
    world: &OctreeWorld,
    store: &mut GradientStore,
    slot: usize,
    q: Vec3,
    coef: f64,
) {
    let tw = grid::tri_weights([
        q.x.clamp(0.0, 1.0),
        q.y.clamp(0.0, 1.0),
        q.z.clamp(0.0, 1.0),
    ]);
    let raw = &world.raw_geo[slot];
    for c in 0..8 {
        store.d_raw[slot][c] += coef * tw[c] * grid::activate_deriv(raw[c]);
    }
}

/// Accumulates `w_rec * d(eval_rec) + w_sp * d(eval_sp)` into the store's
/// raw-density gradients. Weights, flags, and positions stay frozen.
pub fn backward_recsp(
    plan: &RecSpPlan,
    world: &OctreeWorld,
    w_rec: f64,
    w_sp: f64,
    store: &mut GradientStore,
) {
    let center = Vec3 {
        x: 0.5,
        y: 0.5,
        z: 0.5,
    };
    for rec in &plan.records {
        let slot = rec.slot as usize;
        if w_rec != 0.0 && rec.surface {
            add_density_grad(world, store, slot, rec.q_entry, w_rec * rec.weight);
            add_density_grad(world, store, slot, rec.q_exit, -w_rec * rec.weight);
        }
        if w_sp != 0.0 && rec.log_excess > 0.0 && rec.weight != 0.0 {
            add_density_grad(
                world,
                store,
                slot,
                center,
                w_sp * rec.weight * rec.log_excess,
            );
        }
    }
}
