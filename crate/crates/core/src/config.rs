//! Run configuration shared by the CLI commands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::click::TrainConfig;
use crate::datasets::{CLICK_SPLIT, DEFAULT_TOP_K, DEFAULT_WINDOW_DAYS, RATING_SPLIT};
use crate::finetune::FinetuneConfig;
use crate::synth::WorldConfig;
use crate::tower::TowerConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_count: u64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { max_size: 500_000, min_count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_sessions: usize,
    pub n_ratings: usize,
    pub rating_noise: bool,
    pub window_days: u32,
    pub top_k: usize,
    pub click_split: Vec<f64>,
    pub rating_split: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_sessions: 50_000,
            n_ratings: 20_000,
            rating_noise: true,
            window_days: DEFAULT_WINDOW_DAYS,
            top_k: DEFAULT_TOP_K,
            click_split: CLICK_SPLIT.to_vec(),
            rating_split: RATING_SPLIT.to_vec(),
        }
    }
}

/// Everything a pipeline run depends on. `seed` is the single source of
/// randomness: [`RunConfig::resolve`] copies it into every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub tower: TowerConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            world: WorldConfig::default(),
            data: DataConfig::default(),
            vocab: VocabConfig::default(),
            tower: TowerConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
        .resolve()
    }
}

/// Seed offsets keep the generators' random streams apart.
pub const SESSION_SEED_OFFSET: u64 = 1;
pub const RATING_SEED_OFFSET: u64 = 2;

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| Error::Json { line: source.line(), source })?;
        Ok(cfg.resolve())
    }

    pub fn resolve(mut self) -> Self {
        self.world.seed = self.seed;
        self.tower.seed = self.seed;
        self.train.seed = self.seed;
        self.finetune.seed = self.seed;
        self
    }

    pub fn session_seed(&self) -> u64 {
        self.seed.wrapping_add(SESSION_SEED_OFFSET)
    }

    pub fn rating_seed(&self) -> u64 {
        self.seed.wrapping_add(RATING_SEED_OFFSET)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.tower.validate()?;
        self.train.validate()?;
        if self.vocab.max_size == 0 {
            return Err(Error::invalid("vocab max_size must be at least 1"));
        }
        if self.data.click_split.len() != 2 {
            return Err(Error::invalid("click_split needs train and eval fractions"));
        }
        if self.data.rating_split.len() != 3 {
            return Err(Error::invalid("rating_split needs train, valid and test fractions"));
        }
        Ok(())
    }
}
