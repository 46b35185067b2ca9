//! Flag sets and the TOML run configuration that overrides them.

use std::path::{Path, PathBuf};

use clap::Args;
use gpp_core::prep::ResizeMode;
use gpp_core::seed::derive_seed;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::FileHash;
use crate::Failure;

pub const DATA_DIR_ENV: &str = "GPP_DATA_DIR";

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomArgs {
    /// Output directory [default: the data directory]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of volumes [default: 20]
    #[arg(long)]
    pub count: Option<usize>,
    /// Dataset seed [default: derived from the master seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// In-plane size in voxels [default: 96]
    #[arg(long)]
    pub size: Option<usize>,
    /// Axial planes per volume [default: 192]
    #[arg(long)]
    pub planes: Option<usize>,
    /// Nominal growth-plate plane [default: 110]
    #[arg(long)]
    pub gppi: Option<usize>,
    /// Uniform jitter of the plane, in planes [default: 30]
    #[arg(long)]
    pub gppi_jitter: Option<usize>,
    /// Uniform jitter of the protrusion radius, in voxels [default: 1.0]
    #[arg(long)]
    pub radius_jitter: Option<f64>,
    /// Uniform jitter of the shaft radius, in voxels [default: 2.0]
    #[arg(long)]
    pub shaft_jitter: Option<f64>,
    /// Gaussian noise sigma in HU [default: 80]
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepArgs {
    /// Directory of GPV volumes [default: the data directory]
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Lower HU clip bound [default: -1000]
    #[arg(long, allow_negative_numbers = true)]
    pub clip_lo: Option<f64>,
    /// Upper HU clip bound [default: 3000]
    #[arg(long, allow_negative_numbers = true)]
    pub clip_hi: Option<f64>,
    /// Square in-plane size to resize to [default: unchanged]
    #[arg(long)]
    pub size: Option<usize>,
    /// Resize mode, `area` or `linear` [default: area]
    #[arg(long)]
    pub resize: Option<ResizeMode>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// axial-close, blob-refine, window-sn, window-bm or long-axis
    #[arg(long)]
    pub method: Option<String>,
    /// Directory of annotated volumes [default: the data directory]
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Model file; with --folds and no --fold, one `<stem>-fold<i>.gpm` per fold
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training seed [default: derived from the master seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs for every network [default: the method's schedule]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stratified folds; each fold model trains on the other folds
    #[arg(long)]
    pub folds: Option<usize>,
    /// Train only this fold's model
    #[arg(long)]
    pub fold: Option<usize>,
    /// Method settings table, config file only
    #[arg(skip)]
    pub settings: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectArgs {
    /// Method of the models, or `ensemble` for a rounded mean over several
    #[arg(long)]
    pub method: Option<String>,
    /// Model file; repeat for an ensemble
    #[arg(long)]
    pub model: Option<Vec<PathBuf>>,
    /// Directory of volumes [default: the data directory]
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Predictions CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-volume score traces
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    /// Predictions CSV
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Truth CSV [default: truth.csv in the data directory]
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Directory for report.csv and summary.csv [default: next to the predictions]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankArgs {
    /// Summary CSV; repeat to pool several
    #[arg(long)]
    pub summary: Option<Vec<PathBuf>>,
    /// Leaderboard text file [default: leaderboard.txt next to the first summary]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Contents of `--config FILE`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every command seed not given explicitly derives from this.
    pub seed: Option<u64>,
    /// Default data directory; takes precedence over the environment.
    pub data_dir: Option<PathBuf>,
    pub phantom: Option<PhantomArgs>,
    pub prep: Option<PrepArgs>,
    pub train: Option<TrainArgs>,
    pub detect: Option<DetectArgs>,
    pub eval: Option<EvalArgs>,
    pub rank: Option<RankArgs>,
    #[serde(skip)]
    pub file: Option<FileHash>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let bytes = std::fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        cfg.file = Some(FileHash::of_bytes(path, &bytes));
        Ok(cfg)
    }

    pub fn master_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// The explicit seed, or one derived from the master seed and the
    /// command name.
    pub fn seed_for(&self, explicit: Option<u64>, command: &str) -> u64 {
        explicit.unwrap_or_else(|| derive_seed(self.master_seed(), &[command]))
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }

    /// `explicit`, else the data directory, else an input error naming `flag`.
    pub fn dir_or_data(&self, explicit: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
        explicit.or_else(|| self.data_dir()).ok_or_else(|| {
            Failure::input(format!("--{flag} not given and {DATA_DIR_ENV} is not set"))
        })
    }
}

/// Replaces every field of `flags` that the config section sets.
pub fn overlay<T: Serialize + DeserializeOwned>(flags: T, section: Option<&T>) -> Result<T, Failure> {
    let Some(section) = section else {
        return Ok(flags);
    };
    let internal = |e: serde_json::Error| Failure::Internal(format!("config merge: {e}"));
    let mut base = serde_json::to_value(&flags).map_err(internal)?;
    let top = serde_json::to_value(section).map_err(internal)?;
    if let (Some(base), Some(top)) = (base.as_object_mut(), top.as_object()) {
        for (k, v) in top {
            if !v.is_null() {
                base.insert(k.clone(), v.clone());
            }
        }
    }
    serde_json::from_value(base).map_err(internal)
}

pub fn required<T>(value: Option<T>, flag: &str) -> Result<T, Failure> {
    value.ok_or_else(|| Failure::input(format!("--{flag} is required")))
}
