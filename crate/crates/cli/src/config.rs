//! Resolved run configuration, data sources and the run manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spikegrad::data::{load_idx, synth_clusters, synth_patterns, synth_twoclass, Dataset};
use spikegrad::snn::ResetMode;

use crate::CliError;

/// A number, or `auto` to have it chosen by a search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Setting {
    Auto,
    Value(f64),
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Setting::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .map(Setting::Value)
            .ok_or_else(|| format!("expected `auto` or a non-negative number, got {s:?}"))
    }
}

impl TryFrom<String> for Setting {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Setting> for String {
    fn from(s: Setting) -> String {
        s.to_string()
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Auto => f.write_str("auto"),
            Setting::Value(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Twoclass,
    Clusters,
    Patterns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Synthetic {
        generator: SynthKind,
        train_samples: usize,
        test_samples: usize,
        classes: usize,
        /// Feature count for `clusters`, side length for `patterns`.
        size: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Use only the first `n` training samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataConfig {
    pub fn load(&self) -> Result<LoadedData, CliError> {
        let (train, test) = match &self.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    if !p.exists() {
                        return Err(CliError::Usage(format!("data file {} does not exist", p.display())));
                    }
                }
                (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?)
            }
            DataSource::Synthetic {
                generator,
                train_samples,
                test_samples,
                classes,
                size,
                seed,
            } => {
                let n = train_samples + test_samples;
                let all = match generator {
                    SynthKind::Twoclass => synth_twoclass(n, *seed)?,
                    SynthKind::Clusters => synth_clusters(n, *size, *classes, 0.15, *seed)?,
                    SynthKind::Patterns => synth_patterns(n, *classes, *size, *seed)?,
                };
                let train: Vec<usize> = (0..*train_samples).collect();
                let test: Vec<usize> = (*train_samples..n).collect();
                (all.subset(&train, "train")?, all.subset(&test, "test")?)
            }
        };
        let train = match self.train_limit {
            Some(n) => train.take(n)?,
            None => train,
        };
        let test = match self.test_limit {
            Some(n) => test.take(n)?,
            None => test,
        };
        Ok(LoadedData { train, test })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Number of profiling batches.
    pub batches: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    OneCycle,
    Constant,
}

/// Every input of a training run, with defaults filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub arch: String,
    pub data: DataConfig,
    pub timesteps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: Setting,
    pub max_lr: Setting,
    pub schedule: ScheduleKind,
    pub weight_decay: f64,
    pub seed: u64,
    pub batch_norm: bool,
    pub calib_samples: usize,
    pub reset: ResetMode,
    pub dropout: f64,
    pub val_fraction: f64,
    pub tune: TuneConfig,
    pub range_test_steps: usize,
}

impl TrainRun {
    /// Content hash of the configuration, as 16 hex digits.
    pub fn run_id(&self) -> String {
        let text = serde_json::to_vec(self).expect("configuration serializes");
        Sha256::digest(&text)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.timesteps == 0 {
            return usage("--timesteps must be at least 1");
        }
        if self.batch_size == 0 {
            return usage("--batch-size must be at least 1");
        }
        if !self.batch_norm && self.calib_samples == 0 {
            return usage("--no-batchnorm needs calibration data for threshold normalization (--calib-samples > 0)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return usage("--dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return usage("--val-fraction must lie in [0, 1)");
        }
        if !(self.tune.gamma_lo > 0.0 && self.tune.gamma_lo < self.tune.gamma_hi) {
            return usage("gamma bracket needs 0 < --gamma-lo < --gamma-hi");
        }
        if let Setting::Value(v) = self.max_lr {
            if v <= 0.0 {
                return usage("--max-lr must be positive");
            }
        }
        Ok(())
    }
}

/// Files written under `--out-dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputLayout {
    pub manifest: String,
    pub metrics: String,
    pub checkpoint: String,
    pub profiles: Vec<String>,
}

/// Values chosen during the run before training starts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub gamma: Option<f64>,
    pub max_lr: Option<f64>,
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config: TrainRun,
    pub resolved: Resolved,
    pub outputs: OutputLayout,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_slice(&text)
            .map_err(|e| CliError::Usage(format!("malformed manifest {}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(&self.outputs.manifest);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| spikegrad::Error::Io { path, source: e })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setting_parses_and_round_trips() {
        assert_eq!("auto".parse::<Setting>().unwrap(), Setting::Auto);
        assert_eq!("2.5".parse::<Setting>().unwrap(), Setting::Value(2.5));
        assert!("-1".parse::<Setting>().is_err());
        let text = serde_json::to_string(&Setting::Value(0.001)).unwrap();
        assert_eq!(serde_json::from_str::<Setting>(&text).unwrap(), Setting::Value(0.001));
    }
}
