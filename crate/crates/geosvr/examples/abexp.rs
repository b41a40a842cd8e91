// ablation regime probe: image noise level, eta, iterations
use geosvr::adaptive::AdaptSchedule;
use geosvr::camera::Camera;
use geosvr::dataset::{Dataset, Frame};
use geosvr::evalmesh::NearestGrid;
use geosvr::mesh::Mesh;
use geosvr::render::RenderOpts;
use geosvr::scene::{mono_stub, render_synthetic, MonoStubParams, PresetKind};
use geosvr::trainer::{self, GridInit, LossWeights, TrainConfig};
use geosvr::tsdf::{self, TsdfVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synth_noisy(views: usize, res: u32, img_noise: f64, seed: u64) -> Dataset {
    let kind = PresetKind::TwoSlab;
    let scene = kind.scene();
    let stub = MonoStubParams { noise_sigma: 0.005, ..MonoStubParams::default() };
    let mut frames = Vec::new();
    for (i, cam) in kind.cameras(views, res, res).into_iter().enumerate() {
        let view = render_synthetic(&scene, &cam);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
        let mono = mono_stub(&view.depth, res as usize, &stub, &mut rng).unwrap();
        let mut image = view.color;
        for px in image.iter_mut() {
            for c in px.iter_mut() {
                *c = (*c + rng.gen_range(-img_noise..=img_noise)).clamp(0.0, 1.0);
            }
        }
        frames.push(Frame { cam, image, depth_gt: Some(view.depth), depth_mono: mono });
    }
    Dataset { frames, bbox_min: scene.bbox_min, bbox_max: scene.bbox_max }
}

fn fuse(world: &geosvr::grid::OctreeWorld, ds: &Dataset, voxel: f64) -> Mesh {
    let opts = RenderOpts::default();
    let cams: Vec<Camera> = ds.frames.iter().map(|f| f.cam.clone()).collect();
    let maps = trainer::render_depth_maps(world, &cams, &opts);
    let mut vol = TsdfVolume::from_bbox(ds.bbox_min, ds.bbox_max, voxel, 4.0).unwrap();
    for (cam, (depth, valid)) in cams.iter().zip(&maps) {
        vol.integrate(depth, valid, cam);
    }
    tsdf::extract_surface(&vol)
}

fn chamfer(m: &Mesh, ds: &Dataset, seed: u64) -> f64 {
    let kind = PresetKind::TwoSlab;
    let scene = kind.scene();
    let samples = m.sample_points(40_000, seed).unwrap();
    let d1 = samples.points.iter().map(|&p| scene.sdf(p).0.abs()).sum::<f64>()
        / samples.points.len() as f64;
    let dense = m.sample_points(800_000, seed + 1).unwrap();
    let grid = NearestGrid::build(&dense.points).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let surf = kind.sample_surface(30_000, &mut rng);
    let mut d2 = 0.0;
    let mut n2 = 0usize;
    for &q in &surf {
        let mut seen = false;
        for f in &ds.frames {
            let Some((u, v, _)) = f.cam.project(q) else { continue };
            let (w, h) = (f.cam.width as usize, f.cam.height as usize);
            let (ui, vi) = (u.floor() as isize, v.floor() as isize);
            if ui < 0 || vi < 0 || ui >= w as isize || vi >= h as isize { continue; }
            let gt = f.depth_gt.as_ref().unwrap()[vi as usize * w + ui as usize];
            if gt > 0.0 && ((q - f.cam.center()).norm() - gt).abs() < 0.03 {
                seen = true;
                break;
            }
        }
        if seen { d2 += grid.nearest_dist(q); n2 += 1; }
    }
    0.5 * (d1 + d2 / n2 as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let views: usize = args[1].parse().unwrap();
    let res: u32 = args[2].parse().unwrap();
    let img_noise: f64 = args[3].parse().unwrap();
    let iters: u64 = args[4].parse().unwrap();
    let eta: f64 = args[5].parse().unwrap();
    let tau: f64 = args[6].parse().unwrap();
    let seed: u64 = args[7].parse().unwrap();

    let ladder = [
        ("base ", 0.0, 0.0, 0.0, 0.0),
        ("depth", eta, 0.0, 0.0, 0.0),
        ("ncc  ", eta, tau, 0.0, 0.0),
        ("full ", eta, tau, 1e-5, 1e-6),
    ];
    let ds = synth_noisy(views, res, img_noise, seed);
    for (name, eta, tau, mu1, mu2) in ladder {
        let cfg = TrainConfig {
            iterations: iters,
            seed,
            weights: LossWeights { eta, tau, mu1, mu2 },
            adapt: AdaptSchedule {
                prune_interval: 150,
                subdivide_interval: 200,
                subdivide_fraction: 0.5,
                max_voxels: 200_000,
                prune_weight_floor: 1e-4,
                total_iterations: iters,
            },
            ..TrainConfig::default()
        };
        let init = GridInit { init_level: 4, max_level: 7, sh_degree: 1, init_alpha: 0.01 };
        let dir = tempfile::tempdir().unwrap();
        let world = trainer::init_world(&ds, &init).unwrap();
        let result = trainer::train_from(&ds, world, &cfg, dir.path()).unwrap();
        let m = fuse(&result.world, &ds, 0.02);
        let c = chamfer(&m, &ds, seed + 9);
        println!("views={views} res={res} noise={img_noise} iters={iters} eta={eta} tau={tau} seed={seed} {name} chamfer={c:.5} voxels={}", result.world.len());
    }
}
