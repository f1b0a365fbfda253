//! Run configuration (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datastore::{generate_synthetic, load_dataset, FewShotDataset, SyntheticSpec};
use crate::episodic::{AugParams, AugmentationDescriptor, AugmentationPool, TaskConfig};
use crate::error::{Error, Result};
use crate::learner::{ArchConfig, HeadKind, LrSchedule, OptimizerConfig, Precision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Path { path: PathBuf },
    Synthetic { synthetic: SyntheticSpec },
}

impl DatasetSource {
    pub fn load(&self) -> Result<FewShotDataset> {
        match self {
            DatasetSource::Path { path } => load_dataset(path),
            DatasetSource::Synthetic { synthetic } => generate_synthetic(synthetic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoolSpec {
    /// Preset name: single, medium, large, or cutmix-only.
    Preset(String),
    /// Explicit descriptor list.
    Explicit(Vec<AugmentationDescriptor>),
}

impl PoolSpec {
    pub fn resolve(&self) -> Result<AugmentationPool> {
        match self {
            PoolSpec::Preset(name) => crate::episodic::preset_pool(name),
            PoolSpec::Explicit(descriptors) => {
                AugmentationPool::new("custom", descriptors.clone())
            }
        }
    }
}

fn default_widths() -> Vec<usize> {
    vec![16, 32, 64, 128]
}

fn default_ridge_lambda() -> f64 {
    1.0
}

fn default_m() -> usize {
    1
}

fn default_batch_size() -> usize {
    8
}

fn default_eval_episodes() -> usize {
    1000
}

fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub task: TaskConfig,
    pub head: HeadKind,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_ridge_lambda")]
    pub ridge_lambda: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "LrSchedule::desk_default")]
    pub schedule: LrSchedule,
    pub pool: PoolSpec,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Way used for validation/test evaluation when the eval split has
    /// fewer classes than the training way. Defaults to the training way.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_way: Option<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub aug: AugParams,
    /// Apply the crop/flip/jitter baseline under every pool descriptor
    /// instead of replacing it.
    #[serde(default)]
    pub stack_baseline: bool,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

/// Hard cap on candidates per task.
pub const MAX_M: usize = 64;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.m < 1 || self.m > MAX_M {
            return Err(Error::Config(format!("m must be in 1..={MAX_M}, got {}", self.m)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.episodes_per_epoch < 1 {
            return Err(Error::Config("episodes_per_epoch must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.eval_episodes < 2 {
            return Err(Error::Config("eval_episodes must be >= 2".into()));
        }
        self.schedule.validate()?;
        self.pool.resolve()?;
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("widths must be non-empty and positive".into()));
        }
        if self.ridge_lambda <= 0.0 {
            return Err(Error::Config("ridge_lambda must be positive".into()));
        }
        Ok(())
    }

    /// Architecture for a dataset with the configured widths.
    pub fn arch_for(&self, dataset: &FewShotDataset) -> Result<ArchConfig> {
        let arch = ArchConfig {
            input: dataset.geometry,
            widths: self.widths.clone(),
            ridge_lambda: self.ridge_lambda,
        };
        arch.validate()?;
        Ok(arch)
    }
}
