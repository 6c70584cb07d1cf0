use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use sdhsi::losses::{AblationFlags, LossWeights};
use sdhsi::model::Head;
use sdhsi::optim::ScheduleConfig;
use serde::Serialize;

use crate::pipeline::parse_split;

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 16)]
    pub bands: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Options shared by `train` and `ablate`.
#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 17)]
    pub patch: usize,
    /// Number of PCA components (clamped to the scene's band count).
    #[arg(long, default_value_t = 30)]
    pub pca: usize,
    /// Train, validation and test shares, in percent or as fractions.
    #[arg(long, default_value = "30,10,60")]
    pub split: String,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5e-4)]
    pub lr_max: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub lambda_logit: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda_hint: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda_trip: f64,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    /// Train the teacher only; student heads get no training signal.
    #[arg(long)]
    pub no_sd: bool,
    #[arg(long)]
    pub no_triplet: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a teacher-only checkpoint to `<out>/deploy`.
    #[arg(long)]
    pub strip_students: bool,
    /// Write the result table as tab-separated values to this file.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Teacher,
    S1,
    S2,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Teacher => Head::Teacher,
            HeadArg::S1 => Head::S1,
            HeadArg::S2 => Head::S2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Val,
    Test,
    /// Every labeled pixel.
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Evaluate one head; by default every head in the checkpoint.
    #[arg(long, value_enum)]
    pub head: Option<HeadArg>,
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    pub subset: Subset,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Timed repetitions per head for the latency column (0 = skip).
    #[arg(long, default_value_t = 0)]
    pub latency_reps: usize,
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Sd,
    Triplet,
    Splits,
    Patch,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub which: Which,
    #[command(flatten)]
    pub run: RunArgs,
    /// Repeat every arm over this many consecutive seeds and average.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// Run independent arms concurrently.
    #[arg(long)]
    pub parallel_arms: bool,
    /// Directory for per-arm logs and the result table.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

/// Fully resolved run settings; echoed as the command banner.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub scene: PathBuf,
    pub patch: usize,
    pub pca: usize,
    pub split: [f64; 3],
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weights: LossWeights,
    pub flags: AblationFlags,
}

impl RunConfig {
    pub fn from_args(a: &RunArgs) -> Result<Self> {
        let weights = LossWeights {
            logit: a.lambda_logit,
            hint: a.lambda_hint,
            triplet: a.lambda_trip,
            margin: a.margin,
            ..LossWeights::default()
        };
        weights.validate()?;
        let cfg = Self {
            scene: a.scene.clone(),
            patch: a.patch,
            pca: a.pca,
            split: parse_split(&a.split)?,
            epochs: a.epochs,
            batch: a.batch,
            seed: a.seed,
            lr_max: a.lr_max,
            lr_min: a.lr_min,
            weights,
            flags: AblationFlags {
                no_sd: a.no_sd,
                no_triplet: a.no_triplet,
            },
        };
        cfg.schedule().validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            epochs: self.epochs,
            batch_size: self.batch,
        }
    }
}

/// `# key = value` lines for every leaf of a serializable value.
pub fn banner(command: &str, value: &impl Serialize) -> String {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut String) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => out.push_str(&format!("#   {prefix} = {other}\n")),
        }
    }
    let mut out = format!("# sdhsi {command}\n");
    walk("", &serde_json::to_value(value).expect("config serializes"), &mut out);
    out
}
