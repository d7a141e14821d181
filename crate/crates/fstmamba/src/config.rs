//! Run configuration files (TOML).
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! atlas = "neuromark-53"     # or a .toml atlas file, or uniform-<N>x<K>
//! base_channels = 24
//! blocks = [2, 2, 6, 2]
//! steps = [4, 4, 2, 1]
//! task = "binary_classification"
//!
//! [model.encoder]
//! state_size = 16
//!
//! [model.ablations]
//! no_cva = true
//!
//! [train]
//! lr = 1e-3
//! batch_size = 64
//! epochs = 200
//! ```

use std::path::Path;

use fstmamba_core::model::{Ablations, EncoderSettings, ModelConfig, Task};
use fstmamba_core::rope::DEFAULT_THETA_BASE;
use fstmamba_core::topology::ComponentAtlas;
use fstmamba_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEED_ENV: &str = "FSTMAMBA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Atlas reference; when absent the data container's atlas is used.
    pub atlas: Option<String>,
    pub base_channels: usize,
    pub blocks: Vec<usize>,
    pub steps: Vec<usize>,
    pub task: Task,
    pub theta_base: f64,
    pub encoder: EncoderSettings,
    pub ablations: Ablations,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            atlas: None,
            base_channels: 24,
            blocks: vec![2, 2, 6, 2],
            steps: vec![4, 4, 2, 1],
            task: Task::BinaryClassification,
            theta_base: DEFAULT_THETA_BASE,
            encoder: EncoderSettings::default(),
            ablations: Ablations::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    pub steps: usize,
}

impl Default for AttributionSection {
    fn default() -> Self {
        Self { steps: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds both model initialization and training.
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub attribution: AttributionSection,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|source| Error::Toml { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, path)
    }

    /// Seed precedence: explicit flag, config file, environment, zero.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        };
        self.seed = Some(seed);
        self.train.seed = seed;
        Ok(seed)
    }

    pub fn model_config(&self, atlas: ComponentAtlas) -> Result<ModelConfig> {
        let m = &self.model;
        if m.blocks.len() != m.steps.len() {
            return Err(Error::Config(format!("{} stage depths but {} steps", m.blocks.len(), m.steps.len())));
        }
        let mut cfg =
            ModelConfig::small(atlas, m.base_channels, &m.blocks, &m.steps, m.task, self.seed.unwrap_or(0))?;
        cfg.theta_base = m.theta_base;
        cfg.encoder = m.encoder;
        cfg.ablations = m.ablations;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an integer"))),
        Err(_) => Ok(None),
    }
}
