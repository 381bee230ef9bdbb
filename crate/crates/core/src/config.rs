//! The experiment document: one JSON file configuring every pipeline stage.
//! Every section and field is optional and falls back to the desk defaults;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::ArtifactMeta;
use crate::data::read_file;
use crate::elastic::{ElasticOptions, ResolutionGrid};
use crate::error::{Error, Result};
use crate::latency::{FitConfig, OracleParams};
use crate::search::{sha256_hex, SearchConfig};
use crate::space::SupernetConfig;
use crate::training::TrainSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Share held out for validation by training, evaluation and ablations.
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 10,
            count: 2000,
            channels: 3,
            height: 32,
            width: 32,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyConfig {
    pub oracle: OracleParams,
    /// Number of measured architectures used to fit the predictor.
    pub pairs: usize,
    pub fit: FitConfig,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            oracle: OracleParams::default(),
            pairs: 1000,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    /// Phase out grafted activations in linear operators (on) or train them
    /// as pure identities from the start (off).
    pub hybrid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: TrainSchedule::default(),
            hybrid: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticConfig {
    pub grid: ResolutionGrid,
    pub options: ElasticOptions,
    /// Multi-resolution fine-tuning after standard training; zero epochs
    /// skips it.
    pub schedule: TrainSchedule,
    pub n_calib: usize,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        ElasticConfig {
            grid: ResolutionGrid::default(),
            options: ElasticOptions::default(),
            schedule: TrainSchedule {
                epochs: 10,
                graft_epochs: 0,
                lr: 0.02,
                ..TrainSchedule::default()
            },
            n_calib: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub supernet: SupernetConfig,
    pub search: SearchConfig,
    pub latency_oracle: LatencyConfig,
    pub train: TrainConfig,
    pub elastic: ElasticConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            supernet: SupernetConfig::default(),
            search: SearchConfig::default(),
            latency_oracle: LatencyConfig::default(),
            train: TrainConfig::default(),
            elastic: ElasticConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path).map_err(|e| match e {
            Error::MissingArtifact(p) => Error::Config(format!("config file {} not found", p.display())),
            other => other,
        })?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.classes < 2 || d.count < 2 * d.classes {
            return Err(Error::Config(format!(
                "dataset: need classes >= 2 and count >= 2 * classes, got {} and {}",
                d.classes, d.count
            )));
        }
        if d.height != d.width || d.channels == 0 || d.height == 0 {
            return Err(Error::Config("dataset: images must be square and non-empty".into()));
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(Error::Config("dataset: val_fraction must lie in (0, 1)".into()));
        }
        self.supernet.validate()?;
        if self.supernet.input != [d.channels, d.height, d.width] || self.supernet.classes != d.classes {
            return Err(Error::Config(format!(
                "supernet input {:?} / {} classes disagree with the dataset {:?} / {} classes",
                self.supernet.input,
                self.supernet.classes,
                [d.channels, d.height, d.width],
                d.classes
            )));
        }
        self.search.validate()?;
        self.latency_oracle.oracle.validate()?;
        self.train.schedule.validate()?;
        self.elastic.schedule.validate()?;
        self.elastic.grid.validate(self.supernet.total_stride())?;
        if self.elastic.grid.r_max > d.height {
            return Err(Error::Config(format!(
                "elastic: r_max {} exceeds the native side {}",
                self.elastic.grid.r_max, d.height
            )));
        }
        if self.elastic.n_calib == 0 {
            return Err(Error::Config("elastic: n_calib must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, after any command-line overrides.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    pub fn meta(&self) -> ArtifactMeta {
        ArtifactMeta {
            seed: self.seed,
            config_hash: self.hash(),
            config: serde_json::to_value(self).expect("config serialises"),
        }
    }
}
