//! Synthetic ground-truth scenes: analytic signed-distance primitives,
//! sphere-traced reference renders, camera rigs, and the monocular-depth
//! stub that simulates an imperfect external depth estimator.
//!
//! Everything here is deterministic given the preset name, view count, and
//! seed, so synthesized datasets are bitwise reproducible.

use crate::camera::Camera;
use crate::error::{EngineError, Result};
use crate::math::{v3, Vec3};
use rand::Rng;
use rayon::prelude::*;

/// Spatially varying albedo.
#[derive(Clone, Copy, Debug)]
pub enum Albedo {
    Solid([f64; 3]),
    /// `base + amp * sin(f.x x + p.x) sin(f.y y + p.y) sin(f.z z + p.z)`
    /// per channel, clamped to [0, 1]; smooth, so photometric gradients
    /// exist everywhere.
    Sinusoid {
        base: [f64; 3],
        amp: [f64; 3],
        freq: Vec3,
        phase: Vec3,
    },
}

impl Albedo {
    pub fn eval(&self, p: Vec3) -> [f64; 3] {
        match *self {
            Albedo::Solid(c) => c,
            Albedo::Sinusoid { base, amp, freq, phase } => {
                let s = (freq.x * p.x + phase.x).sin()
                    * (freq.y * p.y + phase.y).sin()
                    * (freq.z * p.z + phase.z).sin();
                let mut out = [0.0; 3];
                for ch in 0..3 {
                    out[ch] = (base[ch] + amp[ch] * s).clamp(0.0, 1.0);
                }
                out
            }
        }
    }
}

/// Analytic signed-distance primitive (all exact, hence Lipschitz-1).
#[derive(Clone, Copy, Debug)]
pub enum Prim {
    Sphere { center: Vec3, radius: f64, albedo: Albedo },
    Box { center: Vec3, half: Vec3, albedo: Albedo },
    Plane { normal: Vec3, offset: f64, albedo: Albedo },
}

impl Prim {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Prim::Sphere { center, radius, .. } => (p - center).norm() - radius,
            Prim::Box { center, half, .. } => {
                let q = (p - center).abs() - half;
                let outside = q.max_by_component(Vec3::ZERO).norm();
                let inside = q.max_component().min(0.0);
                outside + inside
            }
            Prim::Plane { normal, offset, .. } => normal.dot(p) - offset,
        }
    }

    /// Analytic SDF gradient (unit except on the medial axis).
    pub fn sdf_grad(&self, p: Vec3) -> Vec3 {
        match *self {
            Prim::Sphere { center, .. } => {
                (p - center).try_normalized().unwrap_or(v3(0.0, 0.0, 1.0))
            }
            Prim::Box { center, half, .. } => {
                let d = p - center;
                let q = d.abs() - half;
                let qp = q.max_by_component(Vec3::ZERO);
                let outside = qp.norm();
                if outside > 0.0 {
                    let sign = v3(d.x.signum(), d.y.signum(), d.z.signum());
                    v3(sign.x * qp.x, sign.y * qp.y, sign.z * qp.z) / outside
                } else {
                    // inside: gradient points along the closest face axis
                    let mut best = 0;
                    for a in 1..3 {
                        if q.axis(a) > q.axis(best) {
                            best = a;
                        }
                    }
                    let mut g = Vec3::ZERO;
                    match best {
                        0 => g.x = d.x.signum(),
                        1 => g.y = d.y.signum(),
                        _ => g.z = d.z.signum(),
                    }
                    g
                }
            }
            Prim::Plane { normal, .. } => normal,
        }
    }

    pub fn albedo(&self) -> &Albedo {
        match self {
            Prim::Sphere { albedo, .. } | Prim::Box { albedo, .. } | Prim::Plane { albedo, .. } => {
                albedo
            }
        }
    }
}

/// A full synthetic scene with one directional light.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub prims: Vec<Prim>,
    /// Direction light travels (shading uses its negation).
    pub light_dir: Vec3,
    pub ambient: f64,
    pub background: [f64; 3],
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
}

impl SyntheticScene {
    /// Union SDF and the index of the closest primitive.
    pub fn sdf(&self, p: Vec3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, prim) in self.prims.iter().enumerate() {
            let d = prim.sdf(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }
}

/// One sphere-traced reference view.
pub struct SyntheticView {
    pub color: Vec<[f64; 3]>,
    /// Ray-parameter distance; 0 marks invalid (background) pixels.
    pub depth: Vec<f64>,
    pub normal: Vec<Vec3>,
}

const TRACE_EPS: f64 = 1e-9;
const TRACE_MAX_STEPS: usize = 4096;

/// Sphere-traces one ray: first hit as `(distance, primitive index)`, or
/// `None` past `t_max`.
pub fn trace_ray(
    scene: &SyntheticScene,
    origin: Vec3,
    dir: Vec3,
    t_max: f64,
) -> Option<(f64, usize)> {
    let mut t = 0.0f64;
    for _ in 0..TRACE_MAX_STEPS {
        let (d, idx) = scene.sdf(origin + dir * t);
        if d < TRACE_EPS {
            return Some((t, idx));
        }
        t += d;
        if t > t_max {
            return None;
        }
    }
    None
}

/// Sphere-traced first-hit render: Lambertian color, ray-parameter depth,
/// analytic surface normals. The camera must be outside every solid.
pub fn render_synthetic(scene: &SyntheticScene, cam: &Camera) -> SyntheticView {
    let eye = cam.center();
    assert!(scene.sdf(eye).0 > 0.0, "camera inside a solid");
    let (w, h) = (cam.width as usize, cam.height as usize);
    let t_max = (scene.bbox_max - scene.bbox_min).norm() + (eye - scene.bbox_min).norm() + 1.0;
    let light = -scene.light_dir.normalized();

    let rows: Vec<Vec<([f64; 3], f64, Vec3)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let (o, d) = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
                match trace_ray(scene, o, d, t_max) {
                    Some((t, idx)) => {
                        let p = o + d * t;
                        let n = scene.prims[idx].sdf_grad(p).normalized();
                        let albedo = scene.prims[idx].albedo().eval(p);
                        let lambert = scene.ambient
                            + (1.0 - scene.ambient) * n.dot(light).max(0.0);
                        let mut c = [0.0; 3];
                        for ch in 0..3 {
                            c[ch] = (albedo[ch] * lambert).clamp(0.0, 1.0);
                        }
                        row.push((c, t, n));
                    }
                    None => row.push((scene.background, 0.0, Vec3::ZERO)),
                }
            }
            row
        })
        .collect();

    let mut out = SyntheticView {
        color: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
        normal: Vec::with_capacity(w * h),
    };
    for row in rows {
        for (c, t, n) in row {
            out.color.push(c);
            out.depth.push(t);
            out.normal.push(n);
        }
    }
    out
}

/// Parameters of the simulated monocular-depth estimator.
#[derive(Clone, Copy, Debug)]
pub struct MonoStubParams {
    /// Global scale (must be positive).
    pub a: f64,
    /// Global shift.
    pub b: f64,
    /// Low-frequency bias amplitude, relative to the mean valid GT depth.
    pub bias_amp: f64,
    /// Bias wavelength in pixels (one full period per `wavelength` pixels).
    pub bias_wavelength: f64,
    /// Per-pixel Gaussian noise sigma (absolute units).
    pub noise_sigma: f64,
}

impl Default for MonoStubParams {
    fn default() -> Self {
        MonoStubParams {
            a: 1.0,
            b: 0.0,
            bias_amp: 0.0,
            bias_wavelength: 128.0,
            noise_sigma: 0.0,
        }
    }
}

/// The smooth sinusoidal bias field added by the stub, evaluated at pixel
/// `(x, y)` for a given mean valid depth. Exposed so tests can subtract it.
pub fn stub_bias(params: &MonoStubParams, mean_depth: f64, x: usize, y: usize) -> f64 {
    let k = 2.0 * std::f64::consts::PI / params.bias_wavelength.max(1e-9);
    params.bias_amp * mean_depth * (k * x as f64).sin() * (k * y as f64).sin()
}

fn gauss(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 bounded away from 0
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Degrades a GT depth map into a plausible monocular estimate:
/// `a * gt + b + bias + noise`, clamped strictly positive; invalid (zero)
/// pixels stay invalid.
pub fn mono_stub(
    gt: &[f64],
    width: usize,
    params: &MonoStubParams,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    assert!(params.a > 0.0 && params.noise_sigma >= 0.0);
    let valid: Vec<f64> = gt.iter().copied().filter(|&d| d > 0.0).collect();
    if valid.is_empty() {
        return Err(EngineError::Config(
            "ground-truth depth has no valid pixels".into(),
        ));
    }
    let mean_depth = valid.iter().sum::<f64>() / valid.len() as f64;
    let mut out = Vec::with_capacity(gt.len());
    for (i, &d) in gt.iter().enumerate() {
        if d <= 0.0 {
            out.push(0.0);
            continue;
        }
        let (x, y) = (i % width, i / width);
        let noise = if params.noise_sigma > 0.0 {
            params.noise_sigma * gauss(rng)
        } else {
            0.0
        };
        let v = params.a * d + params.b + stub_bias(params, mean_depth, x, y) + noise;
        out.push(v.max(1e-6));
    }
    Ok(out)
}

/// Evenly spread inward-looking cameras on an orbit around a target:
/// golden-angle azimuth with a low-discrepancy elevation sweep.
pub fn orbit_cameras(
    views: usize,
    radius: f64,
    target: Vec3,
    elev_min_deg: f64,
    elev_max_deg: f64,
    fov_deg: f64,
    width: u32,
    height: u32,
) -> Vec<Camera> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
    (0..views)
        .map(|i| {
            let az = i as f64 * golden;
            let frac = (i as f64 * 0.618_033_988_749_895) % 1.0;
            let elev = (elev_min_deg + (elev_max_deg - elev_min_deg) * frac).to_radians();
            let eye = target
                + v3(
                    radius * elev.cos() * az.cos(),
                    radius * elev.cos() * az.sin(),
                    radius * elev.sin(),
                );
            Camera::look_at(eye, target, v3(0.0, 0.0, 1.0), f, f, width, height)
        })
        .collect()
}

/// Built-in scene presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresetKind {
    Sphere,
    Box,
    TwoSlab,
    TexturedPlane,
}

impl PresetKind {
    pub fn parse(name: &str) -> Result<PresetKind> {
        match name {
            "sphere" => Ok(PresetKind::Sphere),
            "box" => Ok(PresetKind::Box),
            "two-slab" => Ok(PresetKind::TwoSlab),
            "textured-plane" => Ok(PresetKind::TexturedPlane),
            other => Err(EngineError::Config(format!(
                "unknown scene '{other}' (expected sphere | box | two-slab | textured-plane)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PresetKind::Sphere => "sphere",
            PresetKind::Box => "box",
            PresetKind::TwoSlab => "two-slab",
            PresetKind::TexturedPlane => "textured-plane",
        }
    }

    fn texture(seed: f64) -> Albedo {
        Albedo::Sinusoid {
            base: [0.62, 0.55, 0.5],
            amp: [0.3, 0.33, 0.27],
            freq: v3(6.1 + seed, 5.3 - 0.5 * seed, 7.2 + 0.3 * seed),
            phase: v3(0.7 * seed, 1.1, 2.3 - seed),
        }
    }

    pub fn scene(&self) -> SyntheticScene {
        let light_dir = v3(-0.45, 0.35, -0.82).normalized();
        let (prims, bbox_min, bbox_max) = match self {
            PresetKind::Sphere => (
                vec![Prim::Sphere {
                    center: Vec3::ZERO,
                    radius: 1.0,
                    albedo: Self::texture(0.0),
                }],
                v3(-1.5, -1.5, -1.5),
                v3(1.5, 1.5, 1.5),
            ),
            PresetKind::Box => (
                vec![Prim::Box {
                    center: Vec3::ZERO,
                    half: v3(0.55, 0.42, 0.48),
                    albedo: Self::texture(0.4),
                }],
                v3(-1.1, -1.1, -1.1),
                v3(1.1, 1.1, 1.1),
            ),
            PresetKind::TwoSlab => (
                vec![
                    // upper slab partially occludes the lower one
                    Prim::Box {
                        center: v3(-0.25, 0.0, 0.35),
                        half: v3(0.55, 0.55, 0.06),
                        albedo: Self::texture(0.9),
                    },
                    Prim::Box {
                        center: v3(0.15, 0.0, -0.3),
                        half: v3(0.75, 0.75, 0.06),
                        albedo: Self::texture(1.7),
                    },
                ],
                v3(-1.2, -1.2, -0.8),
                v3(1.2, 1.2, 0.8),
            ),
            PresetKind::TexturedPlane => (
                vec![Prim::Box {
                    center: Vec3::ZERO,
                    half: v3(0.9, 0.9, 0.03),
                    albedo: Albedo::Sinusoid {
                        base: [0.55, 0.5, 0.58],
                        amp: [0.4, 0.42, 0.35],
                        freq: v3(9.3, 8.1, 3.0),
                        phase: v3(0.3, 1.9, 0.8),
                    },
                }],
                v3(-1.2, -1.2, -0.5),
                v3(1.2, 1.2, 0.5),
            ),
        };
        SyntheticScene {
            prims,
            light_dir,
            ambient: 0.35,
            background: [0.02, 0.02, 0.03],
            bbox_min,
            bbox_max,
        }
    }

    pub fn cameras(&self, views: usize, width: u32, height: u32) -> Vec<Camera> {
        match self {
            PresetKind::Sphere => {
                orbit_cameras(views, 3.0, Vec3::ZERO, -55.0, 55.0, 45.0, width, height)
            }
            PresetKind::Box => {
                orbit_cameras(views, 2.8, Vec3::ZERO, -50.0, 60.0, 45.0, width, height)
            }
            PresetKind::TwoSlab => {
                orbit_cameras(views, 3.0, Vec3::ZERO, 20.0, 70.0, 48.0, width, height)
            }
            PresetKind::TexturedPlane => {
                orbit_cameras(views, 2.6, Vec3::ZERO, 25.0, 65.0, 50.0, width, height)
            }
        }
    }

    /// Uniform samples of the analytic surface (area-weighted across
    /// primitive faces), for the ground-truth point cloud.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        let scene = self.scene();
        let mut out = Vec::with_capacity(n);
        // area-weighted choice across primitives
        let areas: Vec<f64> = scene
            .prims
            .iter()
            .map(|p| match *p {
                Prim::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
                Prim::Box { half, .. } => {
                    8.0 * (half.x * half.y + half.y * half.z + half.x * half.z)
                }
                Prim::Plane { .. } => 0.0,
            })
            .collect();
        let total: f64 = areas.iter().sum();
        for _ in 0..n {
            let mut pick = rng.gen_range(0.0..total);
            let mut idx = 0;
            for (i, &a) in areas.iter().enumerate() {
                if pick < a {
                    idx = i;
                    break;
                }
                pick -= a;
            }
            match scene.prims[idx] {
                Prim::Sphere { center, radius, .. } => {
                    let z: f64 = rng.gen_range(-1.0..1.0);
                    let phi: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                    let r_xy = (1.0 - z * z).sqrt();
                    out.push(center + v3(r_xy * phi.cos(), r_xy * phi.sin(), z) * radius);
                }
                Prim::Box { center, half, .. } => {
                    // pick a face pair by area, then a side and a point
                    let face_areas = [
                        half.y * half.z, // x faces
                        half.x * half.z, // y faces
                        half.x * half.y, // z faces
                    ];
                    let ft: f64 = face_areas.iter().sum();
                    let mut fp = rng.gen_range(0.0..ft);
                    let mut axis = 2;
                    for (a, &fa) in face_areas.iter().enumerate() {
                        if fp < fa {
                            axis = a;
                            break;
                        }
                        fp -= fa;
                    }
                    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let u = rng.gen_range(-1.0..1.0);
                    let v = rng.gen_range(-1.0..1.0);
                    let p = match axis {
                        0 => v3(side * half.x, u * half.y, v * half.z),
                        1 => v3(u * half.x, side * half.y, v * half.z),
                        _ => v3(u * half.x, v * half.y, side * half.z),
                    };
                    out.push(center + p);
                }
                Prim::Plane { .. } => {}
            }
        }
        out
    }
}
