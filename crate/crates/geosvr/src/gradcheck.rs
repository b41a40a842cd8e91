//! End-to-end gradient certification on randomized miniature scenes.
//!
//! For every loss term the analytic gradient (tape replay plus the term's
//! own backward pass) is compared against a central finite-difference probe
//! of the identical frozen objective: plans, masks, and normalizers are
//! built once from the base state and held fixed while each parameter is
//! perturbed, so both sides differentiate exactly the same function.
//!
//! Two details keep the probe honest:
//!
//! - early termination is disabled (`t_floor = 0`), since the cutoff makes
//!   the rendered image a discontinuous function of density;
//! - the depth constraint is piecewise linear, so pixels whose frozen
//!   residual sits within a small guard of a kink are masked out (through
//!   the uncertainty weight, which the frozen normalizers ignore) before
//!   the plan is rebuilt; masked counts are reported per scene.

use crate::camera::Camera;
use crate::depth;
use crate::error::Result;
use crate::grad::{
    backward_view, compare_grads, fd_oracle, AdjointBuffers, GradientStore,
};
use crate::grid::{inv_activate, OctreeWorld, VoxelKey};
use crate::loss;
use crate::math::{v3, Vec3};
use crate::mvs::{self, NccConfig, SourceMaps};
use crate::render::{render_view_taped, RenderOpts};
use crate::surfreg;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Number of randomized scenes on top of the bundled fixture.
    pub scenes: usize,
    pub seed: u64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub fd_eps: f64,
    /// Residual magnitude below which a depth pixel is masked as a kink.
    pub kink_guard: f64,
    pub include_fixture: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            scenes: 20,
            seed: 0,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            fd_eps: 1e-5,
            kink_guard: 0.02,
            include_fixture: true,
        }
    }
}

/// One scene/term comparison outcome.
#[derive(Clone, Debug)]
pub struct TermRow {
    pub scene: String,
    pub term: &'static str,
    pub params: usize,
    pub n_fail: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    /// Depth pixels masked near kinks (zero for the other terms).
    pub masked_px: usize,
    pub pass: bool,
}

#[derive(Debug)]
pub struct GradcheckReport {
    pub rows: Vec<TermRow>,
    pub pass: bool,
    pub wall_secs: f64,
}

impl GradcheckReport {
    pub const CSV_HEADER: &'static str =
        "scene,term,params,n_fail,max_rel,mean_rel,masked_px,pass";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.scene, r.term, r.params, r.n_fail, r.max_rel, r.mean_rel, r.masked_px, r.pass
            );
        }
        out
    }

    pub fn max_rel(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel).fold(0.0, f64::max)
    }
}

struct SceneFixture {
    world: OctreeWorld,
    cams: Vec<Camera>,
    /// Per-view photographs; index 0 is the reference view.
    images: Vec<Vec<[f64; 3]>>,
    /// Monocular depth cue for the reference view (0 marks invalid).
    mono: Vec<f64>,
}

fn gradcheck_opts() -> RenderOpts {
    RenderOpts {
        t_floor: 0.0,
        bg: [0.2; 3],
        ..RenderOpts::default()
    }
}

fn orbit_camera(az: f64, el: f64, r: f64, f: f64, width: u32, height: u32) -> Camera {
    let eye = v3(r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin());
    Camera::look_at(eye, Vec3::ZERO, v3(0.0, 0.0, 1.0), f, f, width, height)
}

fn randomize_world(world: &mut OctreeWorld, rng: &mut ChaCha8Rng) {
    for s in 0..world.len() {
        for c in 0..8 {
            world.raw_geo[s][c] = inv_activate(rng.gen_range(0.3..2.5));
        }
    }
    let coeffs = world.coeffs_per_channel();
    let stride = world.sh_stride();
    for s in 0..world.len() {
        for ch in 0..3 {
            for k in 0..coeffs {
                let idx = s * stride + ch * coeffs + k;
                world.sh[idx] = if k == 0 {
                    rng.gen_range(0.3..1.6)
                } else {
                    rng.gen_range(-0.35..0.35)
                };
            }
        }
    }
}

fn noisy_image(base: &[[f64; 3]], rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    base.iter()
        .map(|px| {
            [
                px[0] + rng.gen_range(-0.15..0.15),
                px[1] + rng.gen_range(-0.15..0.15),
                px[2] + rng.gen_range(-0.15..0.15),
            ]
        })
        .collect()
}

fn random_scene(index: usize, seed: u64) -> Result<SceneFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7919 * index as u64));
    // every third scene uses the 64-voxel grid, the rest the 8-voxel one;
    // spherical-harmonic degree 2 only appears on the cheap grids
    let level = if index % 3 == 2 { 2 } else { 1 };
    let sh_degree = if level == 1 {
        [0u32, 1, 2][rng.gen_range(0..3)]
    } else {
        rng.gen_range(0..2)
    };
    let mut world = OctreeWorld::init_dense(2.0, Vec3::ZERO, level, 6, sh_degree, 0.0, 0.5)?;
    randomize_world(&mut world, &mut rng);

    // a tight camera cluster keeps homography warps inside the source
    // margins, so the patch-consistency plans are never vacuous
    let base_az = rng.gen_range(0.0..std::f64::consts::TAU);
    let base_el = rng.gen_range(-0.8..0.8f64);
    let base_r = rng.gen_range(2.6..3.2);
    let f = rng.gen_range(12.0..16.0);
    let w = rng.gen_range(11..=14u32);
    let h = rng.gen_range(11..=14u32);
    let cams: Vec<Camera> = (0..3)
        .map(|vi| {
            let side = if vi == 1 { 1.0 } else { -1.0 };
            let (daz, del) = if vi == 0 {
                (0.0, 0.0)
            } else {
                (side * rng.gen_range(0.06..0.16), rng.gen_range(-0.06..0.06))
            };
            orbit_camera(base_az + daz, base_el + del, base_r, f, w, h)
        })
        .collect();

    let opts = gradcheck_opts();
    let mut images = Vec::with_capacity(cams.len());
    let mut mono = Vec::new();
    for (vi, cam) in cams.iter().enumerate() {
        let (buf, _) = render_view_taped(&world, cam, &opts, None);
        images.push(noisy_image(&buf.color, &mut rng));
        if vi == 0 {
            mono = buf
                .depth
                .iter()
                .zip(&buf.hit)
                .map(|(&d, &hit)| {
                    if hit {
                        0.9 * d + 0.15 + rng.gen_range(-0.03..0.03)
                    } else {
                        0.0
                    }
                })
                .collect();
        }
    }
    Ok(SceneFixture {
        world,
        cams,
        images,
        mono,
    })
}

/// Deterministic 4-voxel slab scene used as the default quick check.
fn bundled_fixture() -> Result<SceneFixture> {
    let mut voxels = Vec::new();
    let coeffs = 4; // degree 1
    for (n, (i, j)) in [(0u32, 0u32), (1, 0), (0, 1), (1, 1)].iter().enumerate() {
        let key = VoxelKey {
            level: 1,
            i: *i,
            j: *j,
            k: 0,
        };
        let mut raw = [0.0; 8];
        for (c, r) in raw.iter_mut().enumerate() {
            *r = inv_activate(0.45 + 0.27 * c as f64 + 0.16 * n as f64);
        }
        let mut sh = Vec::with_capacity(3 * coeffs);
        for ch in 0..3 {
            for k in 0..coeffs {
                sh.push(if k == 0 {
                    0.8 + 0.1 * ch as f64 + 0.05 * n as f64
                } else {
                    0.08 * (k as f64) - 0.05 * ch as f64
                });
            }
        }
        voxels.push((key, raw, sh));
    }
    let world = OctreeWorld::from_voxels(2.0, Vec3::ZERO, 6, 1, voxels)?;
    let up = v3(0.0, 0.0, 1.0);
    let cams = vec![
        Camera::look_at(v3(0.2, -2.8, 0.5), Vec3::ZERO, up, 16.0, 16.0, 14, 14),
        Camera::look_at(v3(0.45, -2.75, 0.42), Vec3::ZERO, up, 16.0, 16.0, 14, 14),
        Camera::look_at(v3(-0.05, -2.82, 0.35), Vec3::ZERO, up, 16.0, 16.0, 14, 14),
    ];
    let opts = gradcheck_opts();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut images = Vec::new();
    let mut mono = Vec::new();
    for (vi, cam) in cams.iter().enumerate() {
        let (buf, _) = render_view_taped(&world, cam, &opts, None);
        images.push(noisy_image(&buf.color, &mut rng));
        if vi == 0 {
            mono = buf
                .depth
                .iter()
                .zip(&buf.hit)
                .map(|(&d, &hit)| if hit { 0.9 * d + 0.15 } else { 0.0 })
                .collect();
        }
    }
    Ok(SceneFixture {
        world,
        cams,
        images,
        mono,
    })
}

fn row_from_compare(
    scene: &str,
    term: &'static str,
    analytic: &GradientStore,
    numeric: &[f64],
    masked_px: usize,
    o: &GradcheckOptions,
) -> TermRow {
    let flat = analytic.flatten();
    let cmp = compare_grads(&flat, numeric, o.rel_tol, o.abs_floor);
    TermRow {
        scene: scene.to_string(),
        term,
        params: cmp.n,
        n_fail: cmp.n_fail,
        max_rel: cmp.max_rel,
        mean_rel: cmp.mean_rel,
        masked_px,
        pass: cmp.n_fail == 0,
    }
}

fn check_scene(label: &str, fix: &SceneFixture, o: &GradcheckOptions) -> Result<Vec<TermRow>> {
    let opts = gradcheck_opts();
    let world = &fix.world;
    let cam = &fix.cams[0];
    let (w, h) = (cam.width as usize, cam.height as usize);
    let n_px = w * h;
    let ssim_weight = 0.2;
    let mut rows = Vec::with_capacity(5);

    let (buf, tape) = render_view_taped(world, cam, &opts, None);

    // photometric
    {
        let target = &fix.images[0];
        let (_, d_color) = loss::photometric_with_grad(&buf.color, target, w, h, ssim_weight);
        let mut adj = AdjointBuffers::zeros(n_px);
        adj.color = d_color;
        let mut store = GradientStore::zeros(world);
        backward_view(world, cam, &tape, &opts, &adj, &mut store, None)?;
        let numeric = fd_oracle(world, o.fd_eps, &|pw: &OctreeWorld| {
            let (b, _) = render_view_taped(pw, cam, &opts, None);
            loss::photometric(&b.color, target, w, h, ssim_weight)
        })?;
        rows.push(row_from_compare(label, "photo", &store, &numeric, 0, o));
    }

    // depth constraint, with kink masking
    {
        let w_unc = depth::unc_weight(&buf.level, &buf.hit);
        let probe = depth::plan_depth(&buf.depth, &fix.mono, &buf.hit, &w_unc, w, h, 5, 1e-12);
        let mut masked = w_unc.clone();
        let mut masked_px = 0;
        for i in 0..n_px {
            if !probe.active[i] {
                continue;
            }
            let nd = (buf.depth[i] - probe.med_d[i]) / (probe.mad_d[i] + probe.eps_n);
            let gd = (buf.depth[i] - probe.gmed_d) / (probe.gmad_d + probe.eps_n);
            let r_patch = nd - probe.norm_mono_patch[i];
            let r_global = gd - probe.norm_mono_global[i];
            if r_patch.abs() < o.kink_guard || r_global.abs() < o.kink_guard {
                masked[i] = 0.0;
                masked_px += 1;
            }
        }
        // the frozen normalizers ignore the weights, so rebuilding with the
        // masked weights leaves every residual untouched
        let plan = depth::plan_depth(&buf.depth, &fix.mono, &buf.hit, &masked, w, h, 5, 1e-12);
        let mut adj = AdjointBuffers::zeros(n_px);
        depth::backward_depth(&plan, &buf.depth, 1.0, &mut adj.depth);
        let mut store = GradientStore::zeros(world);
        backward_view(world, cam, &tape, &opts, &adj, &mut store, None)?;
        let numeric = fd_oracle(world, o.fd_eps, &|pw: &OctreeWorld| {
            let (b, _) = render_view_taped(pw, cam, &opts, None);
            depth::eval_depth(&plan, &b.depth)
        })?;
        rows.push(row_from_compare(label, "depth", &store, &numeric, masked_px, o));
    }

    // patch consistency; the occlusion gate is frozen plan data, so a loose
    // tolerance only admits more pixels into the differentiated objective
    {
        let cfg = NccConfig {
            patch: 5,
            occlusion_rel_tol: 0.25,
            ..NccConfig::default()
        };
        let src_renders: Vec<_> = (1..fix.cams.len())
            .map(|sid| {
                let (b, _) = render_view_taped(world, &fix.cams[sid], &opts, None);
                (sid, b)
            })
            .collect();
        let sources: Vec<SourceMaps> = src_renders
            .iter()
            .map(|(sid, b)| SourceMaps {
                cam: &fix.cams[*sid],
                image: &fix.images[*sid],
                depth: &b.depth,
            })
            .collect();
        let plan = mvs::plan_ncc(
            cam,
            &fix.images[0],
            w,
            h,
            &buf.depth,
            &buf.normal,
            &buf.hit,
            &sources,
            &cfg,
        );
        let mut adj = AdjointBuffers::zeros(n_px);
        let _ = mvs::backward_ncc(
            &plan,
            &buf.depth,
            &buf.normal,
            1.0,
            &mut adj.depth,
            &mut adj.normal,
        );
        let mut store = GradientStore::zeros(world);
        backward_view(world, cam, &tape, &opts, &adj, &mut store, None)?;
        let numeric = fd_oracle(world, o.fd_eps, &|pw: &OctreeWorld| {
            let (b, _) = render_view_taped(pw, cam, &opts, None);
            mvs::eval_ncc(&plan, &b.depth, &b.normal)
        })?;
        rows.push(row_from_compare(label, "ncc", &store, &numeric, 0, o));
    }

    // surface rectification and scaling penalty share a plan
    {
        let plan = surfreg::plan_recsp(world, cam, &tape, &opts, 0.5);
        let mut store = GradientStore::zeros(world);
        surfreg::backward_recsp(&plan, world, 1.0, 0.0, &mut store);
        let numeric = fd_oracle(world, o.fd_eps, &|pw: &OctreeWorld| {
            surfreg::eval_rec(&plan, pw)
        })?;
        rows.push(row_from_compare(label, "rec", &store, &numeric, 0, o));

        let mut store = GradientStore::zeros(world);
        surfreg::backward_recsp(&plan, world, 0.0, 1.0, &mut store);
        let numeric = fd_oracle(world, o.fd_eps, &|pw: &OctreeWorld| {
            surfreg::eval_sp(&plan, pw)
        })?;
        rows.push(row_from_compare(label, "sp", &store, &numeric, 0, o));
    }

    Ok(rows)
}

/// Runs the full certification; `pass` is true only when every parameter of
/// every term on every scene is inside tolerance.
pub fn run(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rows = Vec::new();
    if options.include_fixture {
        let fix = bundled_fixture()?;
        rows.extend(check_scene("fixture", &fix, options)?);
    }
    for s in 0..options.scenes {
        let fix = random_scene(s, options.seed)?;
        rows.extend(check_scene(&format!("{}", s + 1), &fix, options)?);
    }
    let pass = !rows.is_empty() && rows.iter().all(|r| r.pass);
    Ok(GradcheckReport {
        rows,
        pass,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixture_certifies_all_terms() {
        let o = GradcheckOptions {
            scenes: 0,
            ..GradcheckOptions::default()
        };
        let report = run(&o).unwrap();
        assert_eq!(report.rows.len(), 5);
        let terms: Vec<&str> = report.rows.iter().map(|r| r.term).collect();
        assert_eq!(terms, ["photo", "depth", "ncc", "rec", "sp"]);
        for r in &report.rows {
            assert!(r.pass, "{} failed: max_rel {}", r.term, r.max_rel);
            assert!(r.params > 0);
        }
        assert!(report.pass);
        assert!(report.max_rel() < 1e-4);
    }

    #[test]
    fn random_scenes_certify() {
        let o = GradcheckOptions {
            scenes: 2,
            include_fixture: false,
            ..GradcheckOptions::default()
        };
        let report = run(&o).unwrap();
        assert_eq!(report.rows.len(), 10);
        for r in &report.rows {
            assert!(
                r.pass,
                "scene {} term {} max_rel {}",
                r.scene, r.term, r.max_rel
            );
        }
    }

    #[test]
    fn report_is_deterministic_and_csv_shaped() {
        let o = GradcheckOptions {
            scenes: 1,
            include_fixture: false,
            ..GradcheckOptions::default()
        };
        let a = run(&o).unwrap().to_csv();
        let b = run(&o).unwrap().to_csv();
        assert_eq!(a, b);
        let mut lines = a.lines();
        assert_eq!(lines.next().unwrap(), GradcheckReport::CSV_HEADER);
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,photo,"));
        assert_eq!(row.split(',').count(), 8);
    }

    // guards against the patch-consistency check silently passing on an
    // empty plan with zero gradients everywhere
    fn ncc_terms_of(fix: &SceneFixture) -> usize {
        let opts = gradcheck_opts();
        let cam = &fix.cams[0];
        let (w, h) = (cam.width as usize, cam.height as usize);
        let (buf, _) = render_view_taped(&fix.world, cam, &opts, None);
        let cfg = NccConfig {
            patch: 5,
            occlusion_rel_tol: 0.25,
            ..NccConfig::default()
        };
        let src_renders: Vec<_> = (1..fix.cams.len())
            .map(|sid| {
                let (b, _) = render_view_taped(&fix.world, &fix.cams[sid], &opts, None);
                (sid, b)
            })
            .collect();
        let sources: Vec<SourceMaps> = src_renders
            .iter()
            .map(|(sid, b)| SourceMaps {
                cam: &fix.cams[*sid],
                image: &fix.images[*sid],
                depth: &b.depth,
            })
            .collect();
        let plan = mvs::plan_ncc(
            cam,
            &fix.images[0],
            w,
            h,
            &buf.depth,
            &buf.normal,
            &buf.hit,
            &sources,
            &cfg,
        );
        assert!(
            mvs::eval_ncc(&plan, &buf.depth, &buf.normal) >= 0.0 || plan.n_terms == 0
        );
        plan.n_terms
    }

    #[test]
    fn ncc_term_sees_nonzero_signal() {
        let fix = bundled_fixture().unwrap();
        assert!(ncc_terms_of(&fix) > 0, "fixture patch-consistency plan is empty");
        let fix = random_scene(0, 0).unwrap();
        assert!(ncc_terms_of(&fix) > 0, "random-scene patch-consistency plan is empty");
    }
}
