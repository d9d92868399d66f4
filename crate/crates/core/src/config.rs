//! TOML run configuration. Precedence is defaults < file < command line;
//! the command-line layer lives in the binary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{AugmentPolicy, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::metrics::TdcfParams;
use crate::model::PsaConfig;
use crate::train::{TrainConfig, TrainRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub sample_rate: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            sample_rate: SAMPLE_RATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub runs: usize,
    pub warmup: usize,
    pub include_pipeline: bool,
    /// Count elementwise ops in FLOPs.
    pub elementwise: bool,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            runs: 25,
            warmup: 3,
            include_pipeline: false,
            elementwise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: PsaConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub metrics: TdcfParams,
    pub profile: ProfileConfig,
}

impl RunConfigFile {
    pub fn from_toml_str(text: &str) -> Result<RunConfigFile> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfigFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every section that has constraints of its own.
    pub fn validate(&self) -> Result<()> {
        self.model.plan()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.metrics.weights()?;
        if self.data.sample_rate == 0 {
            return Err(Error::Config("data.sample_rate must be positive".into()));
        }
        if self.profile.runs < 2 {
            return Err(Error::Config("profile.runs must be >= 2".into()));
        }
        Ok(())
    }

    pub fn train_run(&self) -> TrainRun {
        TrainRun {
            model: self.model.clone(),
            train: self.train.clone(),
            augment: self.augment.clone(),
        }
    }
}
