// ablation metric probe: exact-sdf side plus observable-surface side
use geosvr::dataset::load_dataset;
use geosvr::evalmesh::NearestGrid;
use geosvr::mesh::read_ply;
use geosvr::scene::PresetKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ds = load_dataset(std::path::Path::new(&args[1])).unwrap();
    let m = read_ply(std::path::Path::new(&args[2])).unwrap();
    let kind = PresetKind::TwoSlab;
    let scene = kind.scene();

    let samples = m.sample_points(40_000, 7).unwrap();
    let d1 = samples.points.iter().map(|&p| scene.sdf(p).0.abs()).sum::<f64>()
        / samples.points.len() as f64;

    let dense = m.sample_points(800_000, 8).unwrap();
    let grid = NearestGrid::build(&dense.points).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let surf = kind.sample_surface(60_000, &mut rng);
    // observable = matches some ground-truth depth sample
    let mut d2 = 0.0;
    let mut n2 = 0usize;
    let mut d2_all = 0.0;
    for &q in &surf {
        d2_all += grid.nearest_dist(q);
        let mut seen = false;
        for f in &ds.frames {
            let Some((u, v, _)) = f.cam.project(q) else { continue };
            let (w, h) = (f.cam.width as usize, f.cam.height as usize);
            let (ui, vi) = (u.floor() as isize, v.floor() as isize);
            if ui < 0 || vi < 0 || ui >= w as isize || vi >= h as isize {
                continue;
            }
            let gt = f.depth_gt.as_ref().unwrap()[vi as usize * w + ui as usize];
            if gt > 0.0 && ((q - f.cam.center()).norm() - gt).abs() < 0.03 {
                seen = true;
                break;
            }
        }
        if seen {
            d2 += grid.nearest_dist(q);
            n2 += 1;
        }
    }
    println!(
        "{}: d1={:.5} d2_obs={:.5} ({} of {}) d2_all={:.5} | chamfer_obs={:.5} chamfer_all={:.5}",
        args[2],
        d1,
        d2 / n2 as f64,
        n2,
        surf.len(),
        d2_all / surf.len() as f64,
        0.5 * (d1 + d2 / n2 as f64),
        0.5 * (d1 + d2_all / surf.len() as f64)
    );
}
