use std::fs;
use std::path::{Path, PathBuf};

use hdc_core::{CascadeConfig, Dataset, HdcError, SamplerConfig, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] HdcError),
    #[error("training aborted: {0}")]
    Training(HdcError),
    #[error("gradient check failed: max relative error {0:.3e}")]
    GradCheck(f64),
}

impl CliError {
    /// Config-style failures during training keep their own code; the rest abort.
    pub fn training(e: HdcError) -> Self {
        match e {
            HdcError::Io { .. } | HdcError::Config(_) => CliError::Core(e),
            other => CliError::Training(other),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(HdcError::Io { .. }) => 2,
            CliError::Core(_) => 1,
            CliError::Training(_) => 3,
            CliError::GradCheck(_) => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV dataset; when absent the synthetic generator is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Per-class share held out for evaluation; 0 evaluates on everything.
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synth: SynthConfig::default(),
            test_fraction: 0.4,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub cascade: CascadeConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("hdc-out"),
            cascade: CascadeConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub const ECHO_FILE: &'static str = "resolved_config.toml";

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| HdcError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| HdcError::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| HdcError::Config(e.to_string()).into())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.cascade.seed = seed;
        self.sampler.seed = seed;
        self.data.synth.seed = seed;
        self.data.split_seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.cascade.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.data.path.is_none() {
            self.data.synth.validate()?;
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(HdcError::Config("data.test_fraction must lie in [0, 1)".into()).into());
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        Ok(match &self.data.path {
            Some(p) => hdc_core::load_csv(p)?,
            None => hdc_core::synth_clusters(&self.data.synth)?,
        })
    }

    /// `(train, eval)`; with no held-out share both are the full dataset.
    pub fn load_split(&self) -> Result<(Dataset, Dataset), CliError> {
        let ds = self.dataset()?;
        if self.data.test_fraction == 0.0 {
            return Ok((ds.clone(), ds));
        }
        Ok(ds.stratified_split(self.data.test_fraction, self.data.split_seed)?)
    }
}
