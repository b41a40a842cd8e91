//! Temporary probe: counts patch-consistency candidates surviving each gate.

use geosvr::camera::Camera;
use geosvr::dataset::{Dataset, Frame};
use geosvr::math::{Mat3, Vec3};
use geosvr::mvs::{self, NccConfig};
use geosvr::render::{self, RenderOpts};
use geosvr::scene::{mono_stub, render_synthetic, MonoStubParams, PresetKind};
use geosvr::trainer::{self, GridInit, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn luminance(c: [f64; 3]) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

fn main() {
    let kind = PresetKind::Sphere;
    let scene = kind.scene();
    let views = 12usize;
    let (w, h) = (32usize, 32usize);
    let cams = kind.cameras(views, w as u32, h as u32);
    let stub = MonoStubParams::default();
    let mut frames = Vec::new();
    for (i, cam) in cams.iter().enumerate() {
        let sv = render_synthetic(&scene, cam);
        let mut rng = ChaCha8Rng::seed_from_u64(0xD0 ^ (i as u64).wrapping_mul(0x9e37_79b9));
        let mono = mono_stub(&sv.depth, w, &stub, &mut rng).unwrap();
        frames.push(Frame {
            cam: cam.clone(),
            image: sv.color,
            depth_gt: Some(sv.depth),
            depth_mono: Some(mono),
        });
    }
    let ds = Dataset {
        frames,
        bbox_min: scene.bbox_min,
        bbox_max: scene.bbox_max,
    };

    let cfg = TrainConfig {
        iterations: 60,
        seed: 3,
        ncc_warmup_frac: 0.0,
        ..TrainConfig::default()
    };
    let init = GridInit {
        init_level: 3,
        max_level: 5,
        sh_degree: 1,
        init_alpha: 0.01,
    };
    let dir = tempfile::tempdir().unwrap();
    let world = trainer::init_world(&ds, &init).unwrap();
    let world = trainer::train_from(&ds, world, &cfg, dir.path())
        .unwrap()
        .world;

    let opts = RenderOpts::default();
    let ncc_cfg = NccConfig {
        patch: 5,
        occlusion_rel_tol: 0.1,
        ..NccConfig::default()
    };
    let all_cams: Vec<Camera> = ds.frames.iter().map(|f| f.cam.clone()).collect();
    let src_ids = mvs::select_sources(&all_cams, 0, 2, 75.0);
    println!("sources: {src_ids:?}");

    let ref_cam = &ds.frames[0].cam;
    let (buf, _) = render::render_view_taped(&world, ref_cam, &opts, None);
    let n_hit = buf.hit.iter().filter(|&&x| x).count();
    println!("ref hits: {n_hit}/{}", w * h);

    let half = (ncc_cfg.patch / 2) as isize;
    let ref_lum: Vec<f64> = ds.frames[0].image.iter().map(|c| luminance(*c)).collect();
    for &sid in &src_ids {
        let (sbuf, _) = render::render_view_taped(&world, &ds.frames[sid].cam, &opts, None);
        let src_cam = &ds.frames[sid].cam;
        let (sw, sh) = (src_cam.width as usize, src_cam.height as usize);
        let (mut c_hit, mut c_patch, mut c_norm, mut c_plane, mut c_warp, mut c_occ, mut c_var) =
            (0usize, 0, 0, 0, 0, 0, 0);
        let (r_rel, t_rel) = mvs::relative_pose(ref_cam, src_cam);
        for iy in 0..h as isize {
            for ix in 0..w as isize {
                let i = (iy as usize) * w + ix as usize;
                if !buf.hit[i] || buf.depth[i] <= 0.0 {
                    continue;
                }
                c_hit += 1;
                if ix - half < 0 || iy - half < 0 || ix + half >= w as isize || iy + half >= h as isize {
                    continue;
                }
                c_patch += 1;
                let n_len = buf.normal[i].norm();
                if n_len < 1e-9 {
                    continue;
                }
                c_norm += 1;
                let n_w = buf.normal[i] / n_len;
                let n_c = ref_cam.r.mul_vec(n_w);
                let dir_c = ref_cam.ray_dir_cam(ix as f64 + 0.5, iy as f64 + 0.5);
                let p_c = dir_c * buf.depth[i];
                let delta = n_c.dot(p_c);
                if delta.abs() < ncc_cfg.plane_tol * p_c.norm() {
                    continue;
                }
                c_plane += 1;
                let w_mat = r_rel.add(&Mat3::outer(t_rel, n_c).scale(1.0 / delta));
                let h_mat = src_cam
                    .k_matrix()
                    .mul_mat(&w_mat)
                    .mul_mat(&ref_cam.k_inv_matrix());
                let mut ok = true;
                'outer: for dy in -half..=half {
                    for dx in -half..=half {
                        let x = Vec3 {
                            x: ix as f64 + dx as f64 + 0.5,
                            y: iy as f64 + dy as f64 + 0.5,
                            z: 1.0,
                        };
                        let y = h_mat.mul_vec(x);
                        if y.z <= 1e-12 {
                            ok = false;
                            break 'outer;
                        }
                        let (u, v) = (y.x / y.z, y.y / y.z);
                        if u < 2.0 || v < 2.0 || u > sw as f64 - 3.0 || v > sh as f64 - 3.0 {
                            ok = false;
                            break 'outer;
                        }
                    }
                }
                if !ok {
                    continue;
                }
                c_warp += 1;
                let (origin, dir_w) = ref_cam.ray(ix as f64 + 0.5, iy as f64 + 0.5);
                let world_point = origin + dir_w * buf.depth[i];
                if !mvs::occlusion_valid(
                    src_cam,
                    &sbuf.depth,
                    sw,
                    sh,
                    world_point,
                    ncc_cfg.occlusion_rel_tol,
                ) {
                    continue;
                }
                c_occ += 1;
                let pp = ncc_cfg.patch * ncc_cfg.patch;
                let mut q = vec![0.0; pp];
                let mut k = 0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let ri = (iy + dy) as usize * w + (ix + dx) as usize;
                        q[k] = ref_lum[ri];
                        k += 1;
                    }
                }
                let qmean = q.iter().sum::<f64>() / pp as f64;
                let a_ss: f64 = q.iter().map(|v| (v - qmean) * (v - qmean)).sum();
                if a_ss <= ncc_cfg.var_guard {
                    continue;
                }
                c_var += 1;
            }
        }
        println!(
            "src {sid}: hit {c_hit} patch {c_patch} norm {c_norm} plane {c_plane} \
             warp {c_warp} occ {c_occ} refvar {c_var}"
        );
    }
}
