//! Command-line surface. Every option can also come from a flat JSON config
//! file passed with `--config`; explicit flags win over config values.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "dfmnet", version, about = "Lightweight RGB-D salient object detection on CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Predict saliency for one RGB-D pair or a whole directory
    Infer(InferArgs),
    /// Score predicted maps against ground truth
    Eval(EvalArgs),
    /// Measure throughput and report parameter sizes
    Bench(BenchArgs),
    /// Audit boundary alignment of RGB-depth pairs
    Quality(QualityArgs),
}

#[derive(Args, Clone, Default)]
pub struct GateFlags {
    /// Disable the scalar depth-quality gate (alpha fixed at 1)
    #[arg(long)]
    pub no_dqw: bool,
    /// Disable the holistic attention map (beta fixed at 1)
    #[arg(long)]
    pub no_dha: bool,
    /// Alignment-vector variant: proposed, dice, add or mul
    #[arg(long)]
    pub vba_variant: Option<String>,
    /// Recalibration passes inside the attention branch (0..=3)
    #[arg(long)]
    pub recalib_count: Option<usize>,
    /// Gating strategy: multiple or identical
    #[arg(long)]
    pub gating: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset root containing rgb/, depth/ (or flow/) and gt/
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Input mode: rgbd or flow3
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Optional hard cap on optimizer steps (handy for smoke runs)
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable flip/crop augmentation
    #[arg(long)]
    pub no_augment: bool,
    /// Where to write the trained weights (.dfmw)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub gates: GateFlags,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// One RGB image (pairs with --depth or --flow)
    #[arg(long)]
    pub rgb: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<PathBuf>,
    #[arg(long)]
    pub flow: Option<PathBuf>,
    /// Saliency PNG for single-image mode
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset root for directory mode
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for directory mode
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Expected input mode; validated against the weight file
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub gates: GateFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of predicted maps
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Directory of ground-truth masks
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Output CSV (id, s_alpha, f_max, e_max, mae)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Comma-separated batch sizes, e.g. 1,8,32
    #[arg(long)]
    pub batch: Option<String>,
    /// Timed forwards per batch size
    #[arg(long)]
    pub n: Option<usize>,
    /// Square input extent
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Output CSV (batch, s_fps)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct QualityArgs {
    /// Directory containing rgb/ and depth/ subdirectories
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Derange the depth assignment before scoring
    #[arg(long)]
    pub shuffle: bool,
    /// Weight file for attaching learned gate averages
    #[arg(long)]
    pub alpha_from: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV (id, c_dice, alpha_bar)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Flat-key JSON config loader.
pub struct Config(Value);

impl Config {
    pub fn load(path: Option<&PathBuf>) -> Result<Config> {
        let Some(path) = path else { return Ok(Config(Value::Null)) };
        if !path.exists() {
            return Err(CliError::MissingFile(path.clone()));
        }
        let text = std::fs::read_to_string(path)?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        if !value.is_object() {
            return Err(CliError::Data(format!(
                "config {} must be a flat JSON object",
                path.display()
            )));
        }
        Ok(Config(value))
    }

    pub fn string(&self, key: &str) -> Option<String> {
        self.0.get(key).and_then(|v| match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            _ => None,
        })
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.string(key).map(PathBuf::from)
    }

    pub fn usize(&self, key: &str) -> Option<usize> {
        self.0.get(key).and_then(|v| v.as_u64()).map(|v| v as usize)
    }

    pub fn u64(&self, key: &str) -> Option<u64> {
        self.0.get(key).and_then(|v| v.as_u64())
    }

    pub fn f32(&self, key: &str) -> Option<f32> {
        self.0.get(key).and_then(|v| v.as_f64()).map(|v| v as f32)
    }

    pub fn bool(&self, key: &str) -> Option<bool> {
        self.0.get(key).and_then(|v| v.as_bool())
    }
}

/// Take the flag when given, else the config value.
pub fn merge<T>(flag: Option<T>, config: Option<T>) -> Option<T> {
    flag.or(config)
}

pub fn required<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| CliError::Usage(format!("missing required option --{what}")))
}
