//! `vcaptcha`: one entry point for every pipeline stage.
//!
//! Each subcommand reads the data root (`images/`, `labels/`, `tags/`),
//! writes into its own output directory under a run lock, and echoes the
//! resolved configuration there as `config.json`.

pub mod commands;
pub mod config;
pub mod data;
mod error;
pub mod rundir;

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vcaptcha_core::pseudolabel::ClusterMethod;

pub use config::{FilterMode, PipelineConfig, PolarityName};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "vcaptcha", version, about = "Patch-tag supervised vessel segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by all subcommands; each overrides the config file.
#[derive(Debug, Args, Default)]
pub struct GlobalArgs {
    /// TOML (or .json) configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Data root; takes precedence over VESSEL_CAPTCHA_HOME and the config.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub polarity: Option<PolarityName>,
    /// Annotation/classifier patch size.
    #[arg(long, global = true)]
    pub patch_size: Option<usize>,
    /// Segmenter input size.
    #[arg(long, global = true)]
    pub seg_patch_size: Option<usize>,
    /// Classifier threshold for auto-tagging and the second opinion.
    #[arg(long, global = true)]
    pub threshold: Option<f32>,
    #[arg(long, global = true, value_enum)]
    pub filter: Option<FilterMode>,
    /// Low-quality volume ids, one per line (for `--filter lq-only`).
    #[arg(long, global = true)]
    pub lq_list: Option<PathBuf>,
    #[arg(long, global = true)]
    pub device: Option<String>,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodName {
    Kmeans,
    Gmm,
}

impl From<MethodName> for ClusterMethod {
    fn from(m: MethodName) -> Self {
        match m {
            MethodName::Kmeans => ClusterMethod::Kmeans,
            MethodName::Gmm => ClusterMethod::Gmm,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the annotation API over the data root.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Require `Authorization: Bearer <token>`.
        #[arg(long)]
        token: Option<String>,
        /// Where tag files are written (default: <data>/tags).
        #[arg(long)]
        tags_dir: Option<PathBuf>,
    },
    /// Generate synthetic volumes with labels and oracle tags.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        /// Cube edge in voxels.
        #[arg(long)]
        shape: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        flip_prob: Option<f64>,
        /// Output data root (default: the data root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn patch tags into pixel-wise pseudo-labels.
    Pseudolabel {
        /// Tag files or directories (default: <data>/tags).
        #[arg(long, num_args = 1..)]
        tags: Vec<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<MethodName>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the patch classifier on tagged training volumes.
    TrainCls {
        /// Tag directory (default: <data>/tags).
        #[arg(long)]
        tags_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the segmenter on pseudo-labels of the training volumes.
    TrainSeg {
        /// Pseudo-label directories, searched in order.
        #[arg(long, num_args = 1.., required = true)]
        pseudo: Vec<PathBuf>,
        /// Select the model on ground-truth labels of the validation volumes
        /// instead of their pseudo-labels.
        #[arg(long)]
        val_labels: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Auto-tag unannotated training volumes and add their pseudo-labels.
    Enlarge {
        #[arg(long)]
        classifier: PathBuf,
        /// Human pseudo-label directories.
        #[arg(long, num_args = 1.., required = true)]
        pseudo: Vec<PathBuf>,
        /// Pool volume ids (default: training volumes without pseudo-labels).
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Choose the classifier threshold that maximizes filtered validation DSC.
    Calibrate {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        segmenter: PathBuf,
        /// Reference masks for validation (default: <data>/labels).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment volumes; with a classifier, also report disagreement.
    Segment {
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        subset: Subset,
        /// Pad slices smaller than the segmenter input.
        #[arg(long)]
        pad: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted masks against labels.
    Evaluate {
        /// Directory with `<id><suffix>.nii.gz` predictions.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value = "_mask")]
        suffix: String,
        /// Reference masks (default: <data>/labels).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        subset: Subset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Serve { .. } => "serve",
            Command::Synth { .. } => "synth",
            Command::Pseudolabel { .. } => "pseudolabel",
            Command::TrainCls { .. } => "train-cls",
            Command::TrainSeg { .. } => "train-seg",
            Command::Enlarge { .. } => "enlarge",
            Command::Calibrate { .. } => "calibrate",
            Command::Segment { .. } => "segment",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

/// Config file, then VESSEL_CAPTCHA_HOME, then flags.
pub fn resolve_config(g: &GlobalArgs, home: Option<PathBuf>) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(h) = home {
        cfg.paths.data_root = h;
    }
    if let Some(d) = &g.data {
        cfg.paths.data_root = d.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
        cfg.train_seg.seed = s;
        cfg.train_cls.seed = s;
    }
    if let Some(p) = g.polarity {
        cfg.polarity = p;
    }
    if let Some(p) = g.patch_size {
        cfg.patch_size = p;
    }
    if let Some(p) = g.seg_patch_size {
        cfg.seg_patch_size = p;
    }
    if let Some(t) = g.threshold {
        cfg.thresholds.classifier = Some(t);
    }
    if let Some(f) = g.filter {
        cfg.filter = f;
    }
    if let Some(d) = &g.device {
        cfg.device = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one subcommand; returns a JSON summary for stdout.
pub fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let home = std::env::var_os(config::HOME_ENV).map(PathBuf::from);
    let cfg = resolve_config(&cli.global, home)?;
    commands::dispatch(&cli.command, &cli.global, &cfg)
}
