//! Plain-text run configuration: namespaced `key = value` lines.
//!
//! One schema drives everything: parsing a file, applying `--set` overrides,
//! serializing the resolved snapshot for the run manifest, and the typed
//! conversions the pipeline modules consume. Rules kept deliberately strict:
//!
//! - unknown keys, malformed lines, and duplicate keys in one file are
//!   errors, never warnings, so a typo cannot silently fall back to a
//!   default;
//! - floats are serialized with the shortest round-trip form, so
//!   `parse(snapshot())` reproduces the configuration bit for bit;
//! - parsing is panic-free on arbitrary bytes.

use crate::adam::AdamParams;
use crate::adaptive::AdaptSchedule;
use crate::error::{EngineError, Result};
use crate::mvs::NccConfig;
use crate::render::RenderOpts;
use crate::trainer::{GridInit, LossWeights, TrainConfig};
use std::collections::BTreeSet;
use std::path::Path;

/// Every tunable number in the pipeline, with its serialized key name.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub train_iters: u64,
    pub train_seed: u64,
    pub train_ssim_weight: f64,
    pub loss_eta: f64,
    pub loss_tau: f64,
    pub loss_mu1: f64,
    pub loss_mu2: f64,
    pub adam_lr_density: f64,
    pub adam_lr_sh0: f64,
    pub adam_lr_sh_hi: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub render_k: usize,
    pub render_t_floor: f64,
    pub render_bg: f64,
    pub render_hit: f64,
    pub grid_init_level: u32,
    pub grid_max_level: u32,
    pub grid_sh_degree: u32,
    pub grid_init_alpha: f64,
    pub depth_patch: usize,
    pub depth_eps_n: f64,
    pub ncc_patch: usize,
    pub ncc_sources: usize,
    pub ncc_occlusion_rel_tol: f64,
    pub ncc_warmup_frac: f64,
    pub ncc_max_angle_deg: f64,
    pub dropout_gamma: f64,
    pub rect_t_alpha: f64,
    pub adapt_prune_interval: u64,
    pub adapt_subdivide_interval: u64,
    pub adapt_subdivide_fraction: f64,
    pub adapt_max_voxels: usize,
    pub adapt_prune_weight_floor: f64,
    pub tsdf_voxel: f64,
    pub tsdf_trunc_factor: f64,
    pub eval_samples: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train_iters: 20_000,
            train_seed: 0,
            train_ssim_weight: 0.2,
            loss_eta: 0.1,
            loss_tau: 0.01,
            loss_mu1: 1e-5,
            loss_mu2: 1e-6,
            adam_lr_density: 0.05,
            adam_lr_sh0: 0.01,
            adam_lr_sh_hi: 0.000_25,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            render_k: 3,
            render_t_floor: 1e-4,
            render_bg: 0.0,
            render_hit: 0.5,
            grid_init_level: 6,
            grid_max_level: 12,
            grid_sh_degree: 1,
            grid_init_alpha: 0.01,
            depth_patch: 7,
            depth_eps_n: 1e-12,
            ncc_patch: 7,
            ncc_sources: 2,
            ncc_occlusion_rel_tol: 0.01,
            ncc_warmup_frac: 0.2,
            ncc_max_angle_deg: 60.0,
            dropout_gamma: 0.5,
            rect_t_alpha: 0.5,
            adapt_prune_interval: 2000,
            adapt_subdivide_interval: 2000,
            adapt_subdivide_fraction: 0.05,
            adapt_max_voxels: 2_000_000,
            adapt_prune_weight_floor: 1e-4,
            tsdf_voxel: 0.002,
            tsdf_trunc_factor: 4.0,
            eval_samples: 100_000,
        }
    }
}

fn parse_f64(key: &str, value: &str) -> std::result::Result<f64, String> {
    let v: f64 = value
        .parse()
        .map_err(|_| format!("key `{key}`: `{value}` is not a number"))?;
    if !v.is_finite() {
        return Err(format!("key `{key}`: value must be finite"));
    }
    Ok(v)
}

fn parse_int<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("key `{key}`: `{value}` is not a whole number"))
}

macro_rules! parse_val {
    (f64, $key:expr, $value:expr) => {
        parse_f64($key, $value)
    };
    (u64, $key:expr, $value:expr) => {
        parse_int::<u64>($key, $value)
    };
    (u32, $key:expr, $value:expr) => {
        parse_int::<u32>($key, $value)
    };
    (usize, $key:expr, $value:expr) => {
        parse_int::<usize>($key, $value)
    };
}

// one table maps key names to fields; `set` and `entries` are generated
// together so they cannot disagree about the schema
macro_rules! schema {
    ($( $key:literal => $field:ident : $kind:ident ),+ $(,)?) => {
        impl Config {
            /// Assigns one key from its text form; unknown keys are errors.
            pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $( $key => { self.$field = parse_val!($kind, $key, value)?; Ok(()) } )+
                    _ => Err(format!("unknown config key `{key}`")),
                }
            }

            /// All keys with their current serialized values, sorted by key.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                let mut v: Vec<(&'static str, String)> =
                    vec![ $( ($key, self.$field.to_string()) ),+ ];
                v.sort_by_key(|e| e.0);
                v
            }
        }
    };
}

schema! {
    "train.iters" => train_iters: u64,
    "train.seed" => train_seed: u64,
    "train.ssim_weight" => train_ssim_weight: f64,
    "loss.eta" => loss_eta: f64,
    "loss.tau" => loss_tau: f64,
    "loss.mu1" => loss_mu1: f64,
    "loss.mu2" => loss_mu2: f64,
    "adam.lr_density" => adam_lr_density: f64,
    "adam.lr_sh0" => adam_lr_sh0: f64,
    "adam.lr_sh_hi" => adam_lr_sh_hi: f64,
    "adam.beta1" => adam_beta1: f64,
    "adam.beta2" => adam_beta2: f64,
    "adam.eps" => adam_eps: f64,
    "render.k" => render_k: usize,
    "render.t_floor" => render_t_floor: f64,
    "render.bg" => render_bg: f64,
    "render.hit" => render_hit: f64,
    "grid.init_level" => grid_init_level: u32,
    "grid.max_level" => grid_max_level: u32,
    "grid.sh_degree" => grid_sh_degree: u32,
    "grid.init_alpha" => grid_init_alpha: f64,
    "depth.patch" => depth_patch: usize,
    "depth.eps_n" => depth_eps_n: f64,
    "ncc.patch" => ncc_patch: usize,
    "ncc.sources" => ncc_sources: usize,
    "ncc.occlusion_rel_tol" => ncc_occlusion_rel_tol: f64,
    "ncc.warmup_frac" => ncc_warmup_frac: f64,
    "ncc.max_angle_deg" => ncc_max_angle_deg: f64,
    "dropout.gamma" => dropout_gamma: f64,
    "rect.t_alpha" => rect_t_alpha: f64,
    "adapt.prune_interval" => adapt_prune_interval: u64,
    "adapt.subdivide_interval" => adapt_subdivide_interval: u64,
    "adapt.subdivide_fraction" => adapt_subdivide_fraction: f64,
    "adapt.max_voxels" => adapt_max_voxels: usize,
    "adapt.prune_weight_floor" => adapt_prune_weight_floor: f64,
    "tsdf.voxel" => tsdf_voxel: f64,
    "tsdf.trunc_factor" => tsdf_trunc_factor: f64,
    "eval.samples" => eval_samples: usize,
}

impl Config {
    /// Parses a config file body. Blank lines and `#` comments are skipped;
    /// everything else must be a `key = value` line with a known key, and a
    /// key may appear at most once per file.
    pub fn parse(text: &str) -> std::result::Result<Config, String> {
        let mut cfg = Config::default();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let n = idx + 1;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {n}: expected `key = value`"))?;
            let key = k.trim();
            let value = v.trim();
            if key.is_empty() {
                return Err(format!("line {n}: empty key"));
            }
            if !seen.insert(key) {
                return Err(format!("line {n}: duplicate key `{key}`"));
            }
            cfg.set(key, value).map_err(|e| format!("line {n}: {e}"))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))?;
        Config::parse(&text)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` override strings in order, after any file.
    pub fn apply_overrides(&mut self, sets: &[String]) -> std::result::Result<(), String> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| format!("override `{s}`: expected key=value"))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| format!("override `{s}`: {e}"))?;
        }
        Ok(())
    }

    /// Serialized form; `parse` of this text reproduces the value exactly.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Domain checks that individual key parses cannot see.
    pub fn validate(&self) -> std::result::Result<(), String> {
        fn check(ok: bool, msg: &str) -> std::result::Result<(), String> {
            if ok {
                Ok(())
            } else {
                Err(msg.to_string())
            }
        }
        check(self.train_iters >= 1, "train.iters must be at least 1")?;
        check(
            (0.0..=1.0).contains(&self.train_ssim_weight),
            "train.ssim_weight must be in [0, 1]",
        )?;
        for (k, v) in [
            ("loss.eta", self.loss_eta),
            ("loss.tau", self.loss_tau),
            ("loss.mu1", self.loss_mu1),
            ("loss.mu2", self.loss_mu2),
        ] {
            check(v >= 0.0, &format!("{k} must be nonnegative"))?;
        }
        for (k, v) in [
            ("adam.lr_density", self.adam_lr_density),
            ("adam.lr_sh0", self.adam_lr_sh0),
            ("adam.lr_sh_hi", self.adam_lr_sh_hi),
        ] {
            check(v >= 0.0, &format!("{k} must be nonnegative"))?;
        }
        check(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            "adam betas must be in [0, 1)",
        )?;
        check(self.adam_eps > 0.0, "adam.eps must be positive")?;
        check(self.render_k >= 1, "render.k must be at least 1")?;
        check(self.render_t_floor >= 0.0, "render.t_floor must be nonnegative")?;
        check(
            (0.0..=1.0).contains(&self.render_bg),
            "render.bg must be in [0, 1]",
        )?;
        check(
            self.render_hit > 0.0 && self.render_hit < 1.0,
            "render.hit must be in (0, 1)",
        )?;
        check(
            self.grid_init_level <= self.grid_max_level,
            "grid.init_level must not exceed grid.max_level",
        )?;
        check(
            self.grid_max_level >= 1 && self.grid_max_level <= crate::grid::MAX_LEVEL_LIMIT,
            "grid.max_level out of range",
        )?;
        check(
            self.grid_sh_degree <= crate::sh::MAX_DEGREE,
            "grid.sh_degree exceeds the supported maximum",
        )?;
        check(
            self.grid_init_alpha > 0.0 && self.grid_init_alpha < 1.0,
            "grid.init_alpha must be in (0, 1)",
        )?;
        for (k, v) in [("depth.patch", self.depth_patch), ("ncc.patch", self.ncc_patch)] {
            check(v >= 3 && v % 2 == 1, &format!("{k} must be odd and at least 3"))?;
        }
        check(self.depth_eps_n > 0.0, "depth.eps_n must be positive")?;
        check(self.ncc_sources >= 1, "ncc.sources must be at least 1")?;
        check(
            self.ncc_occlusion_rel_tol > 0.0,
            "ncc.occlusion_rel_tol must be positive",
        )?;
        check(
            (0.0..=1.0).contains(&self.ncc_warmup_frac),
            "ncc.warmup_frac must be in [0, 1]",
        )?;
        check(
            self.ncc_max_angle_deg > 0.0 && self.ncc_max_angle_deg <= 180.0,
            "ncc.max_angle_deg must be in (0, 180]",
        )?;
        check(
            self.dropout_gamma > 0.0 && self.dropout_gamma <= 1.0,
            "dropout.gamma must be in (0, 1]",
        )?;
        check(
            self.rect_t_alpha > 0.0 && self.rect_t_alpha < 1.0,
            "rect.t_alpha must be in (0, 1)",
        )?;
        check(
            self.adapt_prune_interval >= 1 && self.adapt_subdivide_interval >= 1,
            "adapt intervals must be at least 1",
        )?;
        check(
            self.adapt_subdivide_fraction > 0.0 && self.adapt_subdivide_fraction <= 1.0,
            "adapt.subdivide_fraction must be in (0, 1]",
        )?;
        check(self.adapt_max_voxels >= 1, "adapt.max_voxels must be at least 1")?;
        check(
            self.adapt_prune_weight_floor >= 0.0,
            "adapt.prune_weight_floor must be nonnegative",
        )?;
        check(self.tsdf_voxel > 0.0, "tsdf.voxel must be positive")?;
        check(self.tsdf_trunc_factor > 0.0, "tsdf.trunc_factor must be positive")?;
        check(self.eval_samples >= 1, "eval.samples must be at least 1")?;
        Ok(())
    }

    pub fn render_opts(&self) -> RenderOpts {
        RenderOpts {
            k_samples: self.render_k,
            t_floor: self.render_t_floor,
            bg: [self.render_bg; 3],
            hit_thresh: self.render_hit,
        }
    }

    pub fn grid_init(&self) -> GridInit {
        GridInit {
            init_level: self.grid_init_level,
            max_level: self.grid_max_level,
            sh_degree: self.grid_sh_degree,
            init_alpha: self.grid_init_alpha,
        }
    }

    pub fn train_config(&self, deterministic: bool) -> TrainConfig {
        TrainConfig {
            iterations: self.train_iters,
            seed: self.train_seed,
            deterministic,
            adam: AdamParams {
                lr_density: self.adam_lr_density,
                lr_sh0: self.adam_lr_sh0,
                lr_sh_hi: self.adam_lr_sh_hi,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            weights: LossWeights {
                eta: self.loss_eta,
                tau: self.loss_tau,
                mu1: self.loss_mu1,
                mu2: self.loss_mu2,
            },
            ssim_weight: self.train_ssim_weight,
            render: self.render_opts(),
            depth_patch: self.depth_patch,
            eps_n: self.depth_eps_n,
            ncc: NccConfig {
                patch: self.ncc_patch,
                occlusion_rel_tol: self.ncc_occlusion_rel_tol,
                ..NccConfig::default()
            },
            ncc_sources: self.ncc_sources,
            ncc_max_angle_deg: self.ncc_max_angle_deg,
            ncc_warmup_frac: self.ncc_warmup_frac,
            dropout_gamma: self.dropout_gamma,
            t_alpha: self.rect_t_alpha,
            adapt: AdaptSchedule {
                prune_interval: self.adapt_prune_interval,
                subdivide_interval: self.adapt_subdivide_interval,
                subdivide_fraction: self.adapt_subdivide_fraction,
                max_voxels: self.adapt_max_voxels,
                prune_weight_floor: self.adapt_prune_weight_floor,
                total_iterations: self.train_iters,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let again = Config::parse(&cfg.snapshot()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn file_values_override_defaults() {
        let text = "# experiment\nloss.eta = 0.25\n\ntrain.iters = 12\nncc.warmup_frac = 0.5\n";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.loss_eta, 0.25);
        assert_eq!(cfg.train_iters, 12);
        assert_eq!(cfg.ncc_warmup_frac, 0.5);
        // untouched keys keep their defaults
        assert_eq!(cfg.loss_tau, Config::default().loss_tau);
    }

    #[test]
    fn malformed_input_is_rejected_with_line_numbers() {
        for (text, needle) in [
            ("loss.eta 0.25", "line 1"),
            ("no.such.key = 1", "unknown config key"),
            ("loss.eta = fast", "not a number"),
            ("loss.eta = nan", "finite"),
            ("train.iters = 1.5", "whole number"),
            ("loss.eta = 1\nloss.eta = 2", "duplicate key"),
            ("= 3", "empty key"),
        ] {
            let err = Config::parse(text).unwrap_err();
            assert!(err.contains(needle), "text {text:?} gave {err}");
        }
    }

    #[test]
    fn overrides_apply_after_file_and_report_bad_input() {
        let mut cfg = Config::parse("loss.eta = 0.25").unwrap();
        cfg.apply_overrides(&["loss.eta=0.75".into(), "render.k = 5".into()])
            .unwrap();
        assert_eq!(cfg.loss_eta, 0.75);
        assert_eq!(cfg.render_k, 5);
        assert!(cfg.apply_overrides(&["loss.eta".into()]).is_err());
        assert!(cfg.apply_overrides(&["bogus=1".into()]).is_err());
    }

    #[test]
    fn validate_catches_domain_errors() {
        for (key, value) in [
            ("train.iters", "0"),
            ("depth.patch", "4"),
            ("ncc.patch", "1"),
            ("dropout.gamma", "0"),
            ("dropout.gamma", "1.5"),
            ("render.hit", "1"),
            ("grid.init_level", "15"),
            ("grid.sh_degree", "9"),
            ("adam.beta1", "1"),
            ("tsdf.voxel", "0"),
            ("ncc.warmup_frac", "1.25"),
        ] {
            let mut cfg = Config::default();
            cfg.set(key, value).unwrap();
            assert!(cfg.validate().is_err(), "{key}={value} should fail validation");
        }
    }

    #[test]
    fn every_schema_key_is_settable_from_its_own_snapshot() {
        let cfg = Config::default();
        let mut again = Config::default();
        for (k, v) in cfg.entries() {
            again.set(k, &v).unwrap();
        }
        assert_eq!(again, cfg);
    }

    #[test]
    fn typed_conversions_carry_the_values() {
        let mut cfg = Config::default();
        cfg.set("render.k", "5").unwrap();
        cfg.set("render.bg", "0.25").unwrap();
        cfg.set("loss.tau", "0.5").unwrap();
        cfg.set("train.iters", "77").unwrap();
        let opts = cfg.render_opts();
        assert_eq!(opts.k_samples, 5);
        assert_eq!(opts.bg, [0.25; 3]);
        let tc = cfg.train_config(true);
        assert!(tc.deterministic);
        assert_eq!(tc.weights.tau, 0.5);
        assert_eq!(tc.iterations, 77);
        assert_eq!(tc.adapt.total_iterations, 77);
        assert_eq!(tc.ncc.patch, cfg.ncc_patch);
    }

    #[test]
    fn parser_never_panics_on_arbitrary_bytes() {
        let samples: [&[u8]; 8] = [
            b"",
            b"\x00\x01\x02",
            b"=\n=\n=",
            b"loss.eta = 1e400",
            b"###",
            b"a=b=c",
            b"train.iters = 99999999999999999999999999",
            b"\xff\xfe loss.eta = 1",
        ];
        for s in samples {
            if let Ok(text) = std::str::from_utf8(s) {
                let _ = Config::parse(text);
            }
        }
    }
}
