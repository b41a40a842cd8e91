//! Command-line front door composing the whole pipeline.
//!
//! Single binary, subcommand style. Every numeric knob lives in the plain
//! key=value config; `--set key=value` overrides take precedence over the
//! config file, and dedicated flags (`--seed`, `--tsdf-voxel`) take
//! precedence over both. Every command writes a run manifest next to its
//! outputs.
//!
//! Exit codes: 0 success, 2 argument/config error, 3 numeric failure,
//! 4 invariant violation, 1 I/O failure.

use crate::config::Config;
use crate::dataset::{load_dataset, save_dataset, write_png_rgb, Dataset, Frame};
use crate::error::{EngineError, Result};
use crate::evalmesh;
use crate::gradcheck::{self, GradcheckOptions};
use crate::grid::OctreeWorld;
use crate::manifest::RunManifest;
use crate::mesh::{read_ply, Mesh, PointCloud};
use crate::render::render_view_taped;
use crate::scene::{mono_stub, render_synthetic, MonoStubParams, PresetKind};
use crate::trainer;
use crate::tsdf::{extract_surface, TsdfVolume};
use crate::pfm;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "geosvr", version, about = "Sparse-voxel surface reconstruction")]
pub struct Cli {
    /// Worker threads (default: GEOSVR_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Zero wall-clock fields so repeated runs are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Plain-text key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, e.g. --set loss.eta=0.2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground-truth depth and geometry.
    Synth {
        /// sphere | box | two-slab | textured-plane
        #[arg(long)]
        scene: String,
        #[arg(long)]
        views: usize,
        /// Image size as WxH.
        #[arg(long, default_value = "128x128")]
        res: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Monocular stub depth scale.
        #[arg(long, default_value_t = 1.0)]
        mono_a: f64,
        /// Monocular stub depth offset.
        #[arg(long, default_value_t = 0.0)]
        mono_b: f64,
        /// Low-frequency bias amplitude, relative to mean scene depth.
        #[arg(long, default_value_t = 0.0)]
        mono_bias: f64,
        /// Per-pixel Gaussian noise sigma on the stub depth.
        #[arg(long, default_value_t = 0.01)]
        mono_noise: f64,
        /// Points in the ground-truth surface sample.
        #[arg(long, default_value_t = 100_000)]
        gt_points: usize,
    },
    /// Optimize a voxel world against a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render every dataset view from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fuse rendered depth into a TSDF volume and extract a mesh.
    Mesh {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory providing the fusion cameras and bounds.
        #[arg(long)]
        data: PathBuf,
        /// Overrides tsdf.voxel from the config.
        #[arg(long)]
        tsdf_voxel: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Distance metrics between a predicted and a reference mesh/cloud.
    Eval {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        threshold: f64,
        /// CSV output path.
        #[arg(long, default_value = "eval.csv")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Certify analytic gradients against finite differences.
    Gradcheck {
        /// Randomized scenes on top of the bundled fixture.
        #[arg(long, default_value_t = 0)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV report path.
        #[arg(long, default_value = "gradcheck.csv")]
        out: PathBuf,
    },
}

fn exit_code(e: &EngineError) -> i32 {
    match e {
        EngineError::Config(_) => 2,
        EngineError::Numeric(_) => 3,
        EngineError::Invariant(_) => 4,
        EngineError::Io(_) => 1,
    }
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("GEOSVR_THREADS") {
            Ok(v) => Some(v.parse::<usize>().map_err(|_| {
                EngineError::Config(format!("GEOSVR_THREADS: `{v}` is not a thread count"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        // rayon treats 0 as "all cores"; a second init in one process keeps
        // the first pool, which only happens in tests
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn resolved_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&args.sets).map_err(EngineError::Config)?;
    Ok(cfg)
}

fn manifest_path(out: &Path) -> PathBuf {
    if out.extension().is_some() {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    } else {
        out.join("manifest.json")
    }
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn parse_res(res: &str) -> Result<(u32, u32)> {
    let (w, h) = res
        .split_once('x')
        .ok_or_else(|| EngineError::Config(format!("--res `{res}`: expected WxH")))?;
    let w: u32 = w
        .parse()
        .map_err(|_| EngineError::Config(format!("--res `{res}`: bad width")))?;
    let h: u32 = h
        .parse()
        .map_err(|_| EngineError::Config(format!("--res `{res}`: bad height")))?;
    if w == 0 || h == 0 {
        return Err(EngineError::Config("--res must be positive".into()));
    }
    Ok((w, h))
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    scene: &str,
    views: usize,
    res: &str,
    out: &Path,
    seed: u64,
    stub: &MonoStubParams,
    gt_points: usize,
    deterministic: bool,
) -> Result<()> {
    if views == 0 {
        return Err(EngineError::Config("--views must be at least 1".into()));
    }
    let (w, h) = parse_res(res)?;
    let kind = PresetKind::parse(scene)?;
    let synthetic = kind.scene();
    let cams = kind.cameras(views, w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut frames = Vec::with_capacity(views);
    for cam in cams {
        let view = render_synthetic(&synthetic, &cam);
        let mono = mono_stub(&view.depth, w as usize, stub, &mut rng)?;
        frames.push(Frame {
            cam,
            image: view.color,
            depth_gt: Some(view.depth),
            depth_mono: mono,
        });
    }
    let ds = Dataset {
        frames,
        bbox_min: synthetic.bbox_min,
        bbox_max: synthetic.bbox_max,
    };
    save_dataset(out, &ds)?;

    let points = PointCloud {
        points: kind.sample_surface(gt_points, &mut rng),
    };
    let gt_path = out.join("gt_points.ply");
    points.write_ply(&gt_path)?;

    let mut snapshot = String::new();
    for (k, v) in [
        ("synth.scene", kind.name().to_string()),
        ("synth.views", views.to_string()),
        ("synth.res", format!("{w}x{h}")),
        ("synth.mono_a", stub.a.to_string()),
        ("synth.mono_b", stub.b.to_string()),
        ("synth.mono_bias", stub.bias_amp.to_string()),
        ("synth.mono_noise", stub.noise_sigma.to_string()),
        ("synth.gt_points", gt_points.to_string()),
    ] {
        let _ = writeln!(snapshot, "{k} = {v}");
    }
    let mut m = RunManifest::new(&command_line(), seed, deterministic, &snapshot);
    m.add_artifact("dataset", out);
    m.add_artifact("gt_points", &gt_path);
    m.finish();
    m.write(&manifest_path(out))?;
    println!(
        "wrote {views} views at {w}x{h} plus ground truth to {}",
        out.display()
    );
    Ok(())
}

fn cmd_train(
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    args: &ConfigArgs,
    deterministic: bool,
) -> Result<()> {
    let mut cfg = resolved_config(args)?;
    if let Some(s) = seed {
        cfg.train_seed = s;
    }
    cfg.validate().map_err(EngineError::Config)?;
    let ds = load_dataset(data)?;
    let tc = cfg.train_config(deterministic);
    let world = trainer::init_world(&ds, &cfg.grid_init())?;
    let result = trainer::train_from(&ds, world, &tc, out)?;

    let mut m = RunManifest::new(&command_line(), cfg.train_seed, deterministic, &cfg.snapshot());
    m.add_artifact("checkpoint", &result.checkpoint_path);
    m.add_artifact("log", &result.log_path);
    m.finish();
    m.write(&manifest_path(out))?;
    if let Some(last) = result.rows.last() {
        println!(
            "finished {} iterations: total loss {:.6}, {} voxels",
            last.iteration + 1,
            last.total,
            last.voxels
        );
    }
    println!("checkpoint: {}", result.checkpoint_path.display());
    Ok(())
}

fn cmd_render(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    args: &ConfigArgs,
    deterministic: bool,
) -> Result<()> {
    let cfg = resolved_config(args)?;
    cfg.validate().map_err(EngineError::Config)?;
    let world = OctreeWorld::load_checkpoint(ckpt)?;
    let ds = load_dataset(data)?;
    let opts = cfg.render_opts();

    let renders = out.join("renders");
    let depths = out.join("depth");
    std::fs::create_dir_all(&renders)
        .and_then(|_| std::fs::create_dir_all(&depths))
        .map_err(|e| EngineError::Io(format!("{}: {e}", out.display())))?;
    for (i, frame) in ds.frames.iter().enumerate() {
        let cam = &frame.cam;
        let (buf, _) = render_view_taped(&world, cam, &opts, None);
        write_png_rgb(
            &renders.join(format!("{i:04}.png")),
            &buf.color,
            cam.width,
            cam.height,
        )?;
        pfm::write_gray(
            &depths.join(format!("{i:04}.pfm")),
            cam.width as usize,
            cam.height as usize,
            &buf.depth,
        )?;
    }

    let mut m = RunManifest::new(&command_line(), cfg.train_seed, deterministic, &cfg.snapshot());
    m.add_artifact("renders", &renders);
    m.add_artifact("depth", &depths);
    m.finish();
    m.write(&manifest_path(out))?;
    println!("rendered {} views to {}", ds.frames.len(), out.display());
    Ok(())
}

fn cmd_mesh(
    ckpt: &Path,
    data: &Path,
    tsdf_voxel: Option<f64>,
    out: &Path,
    args: &ConfigArgs,
    deterministic: bool,
) -> Result<()> {
    let mut cfg = resolved_config(args)?;
    if let Some(v) = tsdf_voxel {
        cfg.tsdf_voxel = v;
    }
    cfg.validate().map_err(EngineError::Config)?;
    let world = OctreeWorld::load_checkpoint(ckpt)?;
    let ds = load_dataset(data)?;
    let opts = cfg.render_opts();

    let cams: Vec<_> = ds.frames.iter().map(|f| f.cam.clone()).collect();
    let maps = trainer::render_depth_maps(&world, &cams, &opts);
    let mut vol = TsdfVolume::from_bbox(
        ds.bbox_min,
        ds.bbox_max,
        cfg.tsdf_voxel,
        cfg.tsdf_trunc_factor,
    )?;
    for (cam, (depth, valid)) in cams.iter().zip(&maps) {
        vol.integrate(depth, valid, cam);
    }
    let mesh = extract_surface(&vol);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| EngineError::Io(format!("{}: {e}", parent.display())))?;
    }
    mesh.write_ply(out)?;

    let mut m = RunManifest::new(&command_line(), cfg.train_seed, deterministic, &cfg.snapshot());
    m.add_artifact("mesh", out);
    m.finish();
    m.write(&manifest_path(out))?;
    println!(
        "fused {} views into {} vertices / {} triangles: {}",
        cams.len(),
        mesh.vertices.len(),
        mesh.triangles.len(),
        out.display()
    );
    Ok(())
}

/// A PLY with faces is sampled uniformly by area; one without faces is used
/// as a point cloud directly.
fn cloud_of(path: &Path, samples: usize, seed: u64) -> Result<PointCloud> {
    let mesh: Mesh = read_ply(path)?;
    if mesh.triangles.is_empty() {
        if mesh.vertices.is_empty() {
            return Err(EngineError::Config(format!(
                "{}: no geometry to evaluate",
                path.display()
            )));
        }
        return Ok(PointCloud {
            points: mesh.vertices,
        });
    }
    mesh.sample_points(samples, seed)
}

fn cmd_eval(
    pred: &Path,
    gt: &Path,
    threshold: f64,
    out: &Path,
    seed: Option<u64>,
    args: &ConfigArgs,
    deterministic: bool,
) -> Result<()> {
    let cfg = resolved_config(args)?;
    cfg.validate().map_err(EngineError::Config)?;
    if !(threshold > 0.0) {
        return Err(EngineError::Config("--threshold must be positive".into()));
    }
    let seed = seed.unwrap_or(cfg.train_seed);
    let pred_cloud = cloud_of(pred, cfg.eval_samples, seed)?;
    let gt_cloud = cloud_of(gt, cfg.eval_samples, seed.wrapping_add(1))?;
    let chamfer = evalmesh::chamfer(&pred_cloud, &gt_cloud)?;
    let (precision, recall, f1) = evalmesh::f1(&pred_cloud, &gt_cloud, threshold)?;

    println!("metric     value");
    println!("chamfer    {chamfer:.6}");
    println!("precision  {precision:.6}");
    println!("recall     {recall:.6}");
    println!("f1         {f1:.6}");

    let csv = format!(
        "metric,value\nchamfer,{chamfer}\nprecision,{precision}\nrecall,{recall}\nf1,{f1}\n"
    );
    std::fs::write(out, csv).map_err(|e| EngineError::Io(format!("{}: {e}", out.display())))?;

    let mut m = RunManifest::new(&command_line(), seed, deterministic, &cfg.snapshot());
    m.add_artifact("metrics", out);
    m.finish();
    m.write(&manifest_path(out))?;
    Ok(())
}

fn cmd_gradcheck(scenes: usize, seed: u64, out: &Path, deterministic: bool) -> Result<()> {
    let opts = GradcheckOptions {
        scenes,
        seed,
        ..GradcheckOptions::default()
    };
    let report = gradcheck::run(&opts)?;
    let csv = report.to_csv();
    print!("{csv}");
    println!(
        "max relative error {:.3e} over {} checks in {:.1}s",
        report.max_rel(),
        report.rows.len(),
        report.wall_secs
    );
    std::fs::write(out, &csv).map_err(|e| EngineError::Io(format!("{}: {e}", out.display())))?;

    let snapshot = format!("gradcheck.scenes = {scenes}\n");
    let mut m = RunManifest::new(&command_line(), seed, deterministic, &snapshot);
    m.add_artifact("report", out);
    m.finish();
    m.write(&manifest_path(out))?;
    if !report.pass {
        return Err(EngineError::Numeric(
            "gradient check failed; see the report".into(),
        ));
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    init_threads(cli.threads)?;
    let det = cli.deterministic;
    match &cli.command {
        Command::Synth {
            scene,
            views,
            res,
            out,
            seed,
            mono_a,
            mono_b,
            mono_bias,
            mono_noise,
            gt_points,
        } => {
            let stub = MonoStubParams {
                a: *mono_a,
                b: *mono_b,
                bias_amp: *mono_bias,
                noise_sigma: *mono_noise,
                ..MonoStubParams::default()
            };
            cmd_synth(scene, *views, res, out, *seed, &stub, *gt_points, det)
        }
        Command::Train {
            data,
            out,
            seed,
            cfg,
        } => cmd_train(data, out, *seed, cfg, det),
        Command::Render {
            ckpt,
            data,
            out,
            cfg,
        } => cmd_render(ckpt, data, out, cfg, det),
        Command::Mesh {
            ckpt,
            data,
            tsdf_voxel,
            out,
            cfg,
        } => cmd_mesh(ckpt, data, *tsdf_voxel, out, cfg, det),
        Command::Eval {
            mesh,
            gt,
            threshold,
            out,
            seed,
            cfg,
        } => cmd_eval(mesh, gt, *threshold, out, *seed, cfg, det),
        Command::Gradcheck { scenes, seed, out } => cmd_gradcheck(*scenes, *seed, out, det),
    }
}

/// Parses `args` (including the binary name) and runs; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path with status 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Entry point for the binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn synth_args(dir: &Path, views: usize, res: &str) -> Vec<String> {
        vec![
            "geosvr".into(),
            "--deterministic".into(),
            "synth".into(),
            "--scene".into(),
            "sphere".into(),
            "--views".into(),
            views.to_string(),
            "--res".into(),
            res.into(),
            "--gt-points".into(),
            "2000".into(),
            "--out".into(),
            dir.display().to_string(),
        ]
    }

    #[test]
    fn synth_writes_the_dataset_layout() {
        let tmp = tempdir().unwrap();
        let dir = tmp.path().join("ds");
        assert_eq!(run_from(synth_args(&dir, 3, "24x20")), 0);
        for rel in [
            "cameras.json",
            "bbox.json",
            "images/0000.png",
            "images/0002.png",
            "depth_gt/0001.pfm",
            "depth_mono/0001.pfm",
            "gt_points.ply",
            "manifest.json",
        ] {
            assert!(dir.join(rel).exists(), "missing {rel}");
        }
        let ds = load_dataset(&dir).unwrap();
        assert_eq!(ds.frames.len(), 3);
        assert_eq!(ds.frames[0].cam.width, 24);
    }

    #[test]
    fn synth_is_bitwise_reproducible() {
        let tmp = tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        assert_eq!(run_from(synth_args(&a, 2, "16x16")), 0);
        assert_eq!(run_from(synth_args(&b, 2, "16x16")), 0);
        for rel in ["cameras.json", "images/0001.png", "depth_mono/0000.pfm", "gt_points.ply"] {
            let x = std::fs::read(a.join(rel)).unwrap();
            let y = std::fs::read(b.join(rel)).unwrap();
            assert_eq!(x, y, "{rel} differs between identical runs");
        }
    }

    #[test]
    fn synth_rejects_zero_views_with_argument_exit_code() {
        let tmp = tempdir().unwrap();
        let dir = tmp.path().join("ds");
        assert_eq!(run_from(synth_args(&dir, 0, "16x16")), 2);
        assert_eq!(run_from(synth_args(&dir, 1, "16")), 2);
    }

    #[test]
    fn unknown_scene_and_unknown_flag_are_argument_errors() {
        let tmp = tempdir().unwrap();
        let dir = tmp.path().join("ds");
        let mut args = synth_args(&dir, 2, "16x16");
        args[4] = "donut".into();
        assert_eq!(run_from(args), 2);
        assert_eq!(run_from(["geosvr", "synth", "--bogus"]), 2);
    }

    #[test]
    fn train_on_single_view_is_a_config_error() {
        let tmp = tempdir().unwrap();
        let dir = tmp.path().join("ds");
        assert_eq!(run_from(synth_args(&dir, 1, "16x16")), 0);
        let code = run_from([
            "geosvr".to_string(),
            "train".into(),
            "--data".into(),
            dir.display().to_string(),
            "--out".into(),
            tmp.path().join("run").display().to_string(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn pipeline_smoke_train_render_mesh_eval() {
        let tmp = tempdir().unwrap();
        let ds = tmp.path().join("ds");
        assert_eq!(run_from(synth_args(&ds, 4, "20x20")), 0);

        let run_dir = tmp.path().join("run");
        let code = run_from([
            "geosvr".to_string(),
            "--deterministic".into(),
            "train".into(),
            "--data".into(),
            ds.display().to_string(),
            "--out".into(),
            run_dir.display().to_string(),
            "--set".into(),
            "train.iters=6".into(),
            "--set".into(),
            "grid.init_level=3".into(),
            "--set".into(),
            "grid.max_level=4".into(),
            "--set".into(),
            "ncc.warmup_frac=0".into(),
        ]);
        assert_eq!(code, 0);
        let ckpt = run_dir.join("checkpoint.gsvr");
        assert!(ckpt.exists());
        assert!(run_dir.join("train_log.csv").exists());
        assert!(run_dir.join("manifest.json").exists());

        let render_dir = tmp.path().join("renders");
        let code = run_from([
            "geosvr".to_string(),
            "render".into(),
            "--ckpt".into(),
            ckpt.display().to_string(),
            "--data".into(),
            ds.display().to_string(),
            "--out".into(),
            render_dir.display().to_string(),
        ]);
        assert_eq!(code, 0);
        assert!(render_dir.join("renders/0003.png").exists());
        assert!(render_dir.join("depth/0000.pfm").exists());

        let mesh_path = tmp.path().join("pred.ply");
        let code = run_from([
            "geosvr".to_string(),
            "mesh".into(),
            "--ckpt".into(),
            ckpt.display().to_string(),
            "--data".into(),
            ds.display().to_string(),
            "--tsdf-voxel".into(),
            "0.05".into(),
            "--out".into(),
            mesh_path.display().to_string(),
        ]);
        assert_eq!(code, 0);
        assert!(mesh_path.exists());
        assert!(tmp.path().join("pred.ply.manifest.json").exists());
        read_ply(&mesh_path).unwrap();

        // identical inputs must give a perfect score
        let csv = tmp.path().join("eval.csv");
        let code = run_from([
            "geosvr".to_string(),
            "eval".into(),
            "--mesh".into(),
            ds.join("gt_points.ply").display().to_string(),
            "--gt".into(),
            ds.join("gt_points.ply").display().to_string(),
            "--threshold".into(),
            "0.01".into(),
            "--out".into(),
            csv.display().to_string(),
        ]);
        assert_eq!(code, 0);
        let body = std::fs::read_to_string(&csv).unwrap();
        assert!(body.contains("f1,1"), "metrics were {body}");
    }

    #[test]
    fn missing_dataset_is_an_io_failure() {
        let tmp = tempdir().unwrap();
        let code = run_from([
            "geosvr".to_string(),
            "train".into(),
            "--data".into(),
            tmp.path().join("nope").display().to_string(),
            "--out".into(),
            tmp.path().join("out").display().to_string(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn gradcheck_fixture_reports_and_exits_zero() {
        let tmp = tempdir().unwrap();
        let csv = tmp.path().join("report.csv");
        let code = run_from([
            "geosvr".to_string(),
            "gradcheck".into(),
            "--out".into(),
            csv.display().to_string(),
        ]);
        assert_eq!(code, 0);
        let body = std::fs::read_to_string(&csv).unwrap();
        assert!(body.starts_with(crate::gradcheck::GradcheckReport::CSV_HEADER));
        assert!(body.contains("fixture,photo"));
    }
}
