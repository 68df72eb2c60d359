//! `geossl`: synthetic data, geo-clustering, pretraining, probing,
//! finetuning, evaluation and reports from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

mod commands;
mod config;
mod plot;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geossl::eval::{Granularity, TemporalRule};
use geossl::model::FeatureSource;
use geossl::trainer::{Schedule, Variant};

use config::RunConfig;

#[derive(Debug)]
pub struct CliError {
    usage: bool,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            usage: true,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            usage: false,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        if self.usage {
            1
        } else {
            2
        }
    }
}

impl From<geossl::Error> for CliError {
    fn from(e: geossl::Error) -> Self {
        Self {
            usage: e.is_usage(),
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "geossl",
    version,
    about = "Geography-aware contrastive pretraining on multi-view area imagery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file of settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Declares a flag group whose fields mirror `RunConfig` keys.
macro_rules! flags {
    ($name:ident { $($(#[$meta:meta])* $field:ident: $ty:ty,)* }) => {
        #[derive(Debug, Args)]
        struct $name {
            $($(#[$meta])* #[arg(long)] $field: Option<$ty>,)*
        }

        impl $name {
            fn overlay(&self, cfg: &mut RunConfig) {
                $(if let Some(v) = &self.$field {
                    cfg.$field = Some(v.clone());
                })*
            }
        }
    };
}

flags!(GenDataFlags {
    /// Number of areas.
    areas: usize,
    classes: usize,
    /// Views per area (sets both bounds).
    views: usize,
    min_views: usize,
    max_views: usize,
    /// Number of ground-truth geo-centers.
    geo_centers: usize,
    /// Probability that an area's class follows its geo-center.
    rho: f64,
    temporal_noise: f64,
    area_noise: f64,
    /// Spread of areas around their center, in degrees.
    coord_noise: f64,
    height: usize,
    width: usize,
    channels: usize,
    /// Fraction of areas held out into test.jsonl.
    test_fraction: f64,
});

flags!(ClusterFlags {
    manifest: PathBuf,
    /// Number of geo-clusters.
    k: usize,
    max_iter: usize,
    tol: f64,
});

flags!(PretrainFlags {
    manifest: PathBuf,
    /// Geo-cluster model from `cluster` (geo variants).
    geo_model: PathBuf,
    /// Continue from this checkpoint.
    resume: PathBuf,
    /// moco, moco+geo, moco+tp, moco+geo+tp, geo-only or supervised.
    variant: Variant,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    lr_floor: f64,
    /// constant or cosine.
    schedule: Schedule,
    momentum: f64,
    weight_decay: f64,
    temperature: f64,
    alpha: f64,
    beta: f64,
    ema_momentum: f64,
    queue_size: usize,
    /// Number of geo-clusters (defaults to the geo model's).
    k: usize,
    /// backbone or projection.
    geo_features: FeatureSource,
    pool: usize,
    /// Comma-separated backbone widths.
    #[arg(value_delimiter = ',')]
    hidden: Vec<usize>,
    embed_dim: usize,
    proj_depth: usize,
    crop_min: f64,
    crop_max: f64,
    flip_prob: f64,
    jitter_prob: f64,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    grayscale_prob: f64,
});

flags!(ProbeFlags {
    checkpoint: PathBuf,
    /// Labeled training manifest.
    manifest: PathBuf,
    probe_max_iter: usize,
    probe_tol: f64,
    probe_l2: f64,
    /// Divide centred features by their deviation.
    standardize: bool,
});

flags!(FinetuneFlags {
    checkpoint: PathBuf,
    /// Labeled training manifest.
    manifest: PathBuf,
    finetune_epochs: usize,
    finetune_batch_size: usize,
    finetune_lr: f64,
    finetune_momentum: f64,
    finetune_weight_decay: f64,
    probe_max_iter: usize,
    probe_tol: f64,
    probe_l2: f64,
});

flags!(EvalFlags {
    checkpoint: PathBuf,
    /// Probe from `probe` (with --checkpoint).
    probe: PathBuf,
    /// Model from `finetune` (instead of --checkpoint/--probe).
    finetuned: PathBuf,
    /// Labeled test manifest.
    manifest: PathBuf,
    /// single or temporal.
    granularity: Granularity,
    /// mean or max-confidence.
    temporal_rule: TemporalRule,
});

flags!(ReportFlags {
    manifest: PathBuf,
    geo_model: PathBuf,
    /// Loss trace written by `pretrain`.
    loss_csv: PathBuf,
});

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: GenDataFlags,
    },
    /// Fit k-means geo-clusters on area coordinates.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: ClusterFlags,
    },
    /// Pretrain an encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: PretrainFlags,
    },
    /// Fit a linear probe on frozen features.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: ProbeFlags,
    },
    /// Finetune encoder and classifier end to end.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: FinetuneFlags,
    },
    /// Score a probe or finetuned model on a labeled manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: EvalFlags,
    },
    /// Dataset statistics, histograms and loss curves.
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: ReportFlags,
    },
}

fn settings(common: &Common, overlay: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    overlay(&mut cfg);
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    cfg.absolutize()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common, flags } => {
            commands::gen_data(settings(&common, |c| flags.overlay(c))?)
        }
        Command::Cluster { common, flags } => {
            commands::cluster(settings(&common, |c| flags.overlay(c))?)
        }
        Command::Pretrain { common, flags } => {
            commands::pretrain(settings(&common, |c| flags.overlay(c))?)
        }
        Command::Probe { common, flags } => {
            commands::probe(settings(&common, |c| flags.overlay(c))?)
        }
        Command::Finetune { common, flags } => {
            commands::finetune(settings(&common, |c| flags.overlay(c))?)
        }
        Command::Eval { common, flags } => commands::eval(settings(&common, |c| flags.overlay(c))?),
        Command::Report { common, flags } => {
            commands::report(settings(&common, |c| flags.overlay(c))?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
