//! Flat run configuration shared by every command.
//!
//! A `--config` file is a TOML table of the keys below. Keys a command does
//! not read are allowed (one file can drive a whole pipeline); unknown keys
//! are rejected. Command-line flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use geossl::eval::{Granularity, TemporalRule};
use geossl::model::FeatureSource;
use geossl::trainer::{Schedule, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,

    pub manifest: Option<PathBuf>,
    pub geo_model: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub probe: Option<PathBuf>,
    pub finetuned: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,

    pub areas: Option<usize>,
    pub classes: Option<usize>,
    pub views: Option<usize>,
    pub min_views: Option<usize>,
    pub max_views: Option<usize>,
    pub geo_centers: Option<usize>,
    pub rho: Option<f64>,
    pub temporal_noise: Option<f64>,
    pub area_noise: Option<f64>,
    pub coord_noise: Option<f64>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
    pub test_fraction: Option<f64>,

    pub k: Option<usize>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,

    pub variant: Option<Variant>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_floor: Option<f64>,
    pub schedule: Option<Schedule>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub temperature: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub ema_momentum: Option<f64>,
    pub queue_size: Option<usize>,
    pub geo_features: Option<FeatureSource>,
    pub pool: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub embed_dim: Option<usize>,
    pub proj_depth: Option<usize>,
    pub crop_min: Option<f64>,
    pub crop_max: Option<f64>,
    pub flip_prob: Option<f64>,
    pub jitter_prob: Option<f64>,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub saturation: Option<f64>,
    pub grayscale_prob: Option<f64>,

    pub probe_max_iter: Option<usize>,
    pub probe_tol: Option<f64>,
    pub probe_l2: Option<f64>,
    pub standardize: Option<bool>,

    pub finetune_epochs: Option<usize>,
    pub finetune_batch_size: Option<usize>,
    pub finetune_lr: Option<f64>,
    pub finetune_momentum: Option<f64>,
    pub finetune_weight_decay: Option<f64>,

    pub granularity: Option<Granularity>,
    pub temporal_rule: Option<TemporalRule>,
}

impl RunConfig {
    /// Read a config file; relative paths in it are taken from its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for slot in cfg.paths_mut() {
            if let Some(p) = slot.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 8] {
        [
            &mut self.out,
            &mut self.manifest,
            &mut self.geo_model,
            &mut self.checkpoint,
            &mut self.probe,
            &mut self.finetuned,
            &mut self.resume,
            &mut self.loss_csv,
        ]
    }

    /// Make every path absolute. Must run before any work starts.
    pub fn absolutize(&mut self) -> Result<(), CliError> {
        for slot in self.paths_mut() {
            if let Some(p) = slot.as_mut() {
                *p = std::path::absolute(&*p)
                    .map_err(|e| CliError::usage(format!("cannot resolve {}: {e}", p.display())))?;
            }
        }
        Ok(())
    }

    /// Write the effective configuration (minus `out`) to `<out>/config.toml`.
    pub fn echo(&self, out: &Path) -> Result<(), CliError> {
        let mut shown = self.clone();
        shown.out = None;
        let text =
            toml::to_string(&shown).map_err(|e| CliError::runtime(format!("config echo: {e}")))?;
        let path = out.join("config.toml");
        fs::write(&path, text)
            .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
    }
}

/// Value of a setting, recording `default` in the config when unset.
pub fn or<T: Clone>(slot: &mut Option<T>, default: T) -> T {
    slot.get_or_insert(default).clone()
}

/// An input file that must exist.
pub fn input(slot: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
    let path = slot.clone().ok_or_else(|| {
        CliError::usage(format!(
            "missing input `{key}`: pass --{} or set `{key}` in --config",
            key.replace('_', "-")
        ))
    })?;
    if !path.is_file() {
        return Err(CliError::usage(format!(
            "{key} {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

/// The output directory, created if needed.
pub fn output_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out.clone().ok_or_else(|| {
        CliError::usage("missing output directory: pass --out or set `out` in --config")
    })?;
    if out.exists() && !out.is_dir() {
        return Err(CliError::usage(format!(
            "--out {} is not a directory",
            out.display()
        )));
    }
    fs::create_dir_all(&out)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", out.display())))?;
    Ok(out)
}
