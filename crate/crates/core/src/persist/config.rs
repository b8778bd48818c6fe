use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::abc::AbcParams;
use crate::curriculum::{BaselineConfig, BaselineSettings};
use crate::env::GridConfig;
use crate::goal::RewardParams;
use crate::holdout::EvalConfig;
use crate::nn::ArchitectureSpec;
use crate::ppo::PpoHyperParams;
use crate::selfplay::{GameConfig, PoolConfig, SelfPlaySettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{origin}:{line}:{column}: {message}")]
    Parse { origin: String, line: usize, column: usize, message: String },
    #[error("{origin}:{line}: {message}")]
    Invalid { origin: String, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer rounds for `train` when not given on the command line.
    pub steps: u64,
    /// Self-play episodes per worker and round.
    pub episodes_per_worker: usize,
    /// Rounds between checkpoints.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 1000, episodes_per_worker: 8, checkpoint_interval: 50 }
    }
}

/// Every setting of a run. Missing keys take their defaults and saving writes all of
/// them back out, so a saved config reproduces the run on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub grid: GridConfig,
    pub reward: RewardParams,
    pub game: GameConfig,
    pub ppo: PpoHyperParams,
    pub abc: AbcParams,
    pub pool: PoolConfig,
    pub eval: EvalConfig,
    pub baseline: BaselineConfig,
    pub network: ArchitectureSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            workers: 4,
            grid: GridConfig::default(),
            reward: RewardParams::default(),
            game: GameConfig::default(),
            ppo: PpoHyperParams::default(),
            abc: AbcParams::default(),
            pool: PoolConfig::default(),
            eval: EvalConfig::default(),
            baseline: BaselineConfig::default(),
            network: ArchitectureSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

fn line_of_key(text: &str, key: &str) -> usize {
    let quoted = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&quoted)).map(|i| i + 1).unwrap_or(1)
}

impl RunConfig {
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|(section, message)| ConfigError::Invalid {
            origin: origin.to_string(),
            line: line_of_key(text, section),
            message: format!("{section}: {message}"),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| ConfigError::Io { path: parent.to_path_buf(), source })?;
        }
        fs::write(path, self.to_json_pretty() + "\n")
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
    }

    /// Checks every section; on failure returns the offending section name and a message.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        self.grid.validate().map_err(|e| ("grid", e.to_string()))?;
        self.reward.validate().map_err(|e| ("reward", e))?;
        self.game.validate().map_err(|e| ("game", e))?;
        if self.game.n_objects.iter().any(|&n| n > self.grid.max_objects) {
            return Err(("game", "n_objects exceeds grid.max_objects".into()));
        }
        self.ppo.validate().map_err(|e| ("ppo", e))?;
        self.abc.validate().map_err(|e| ("abc", e))?;
        if self.pool.capacity == 0 || self.pool.snapshot_interval == 0 {
            return Err(("pool", "capacity and snapshot_interval must be >= 1".into()));
        }
        if self.eval.episodes == 0 || self.eval.bob_max_steps_per_object == 0 {
            return Err(("eval", "episodes and bob_max_steps_per_object must be >= 1".into()));
        }
        let f = &self.baseline.fadr;
        if f.queue_len == 0 || !(0.0..=1.0).contains(&f.threshold) || !(f.increment > 0.0 && f.increment <= 1.0) {
            return Err(("baseline", "fadr needs queue_len >= 1, threshold in [0, 1], increment in (0, 1]".into()));
        }
        self.network.validate().map_err(|e| ("network", e.to_string()))?;
        if self.workers == 0 {
            return Err(("workers", "must be >= 1".into()));
        }
        if self.train.checkpoint_interval == 0 {
            return Err(("train", "checkpoint_interval must be >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn selfplay_settings(&self) -> SelfPlaySettings {
        SelfPlaySettings {
            grid: self.grid.clone(),
            rewards: self.reward.clone(),
            game: self.game.clone(),
            abc: self.abc.clone(),
            ppo: self.ppo.clone(),
            pool: self.pool.clone(),
            n_workers: self.workers,
            episodes_per_worker: self.train.episodes_per_worker,
            seed: self.seed,
        }
    }

    pub fn baseline_settings(&self) -> BaselineSettings {
        BaselineSettings {
            grid: self.grid.clone(),
            rewards: self.reward.clone(),
            ppo: self.ppo.clone(),
            baseline: self.baseline.clone(),
            bob_max_steps_per_object: self.game.bob_max_steps_per_object,
            n_objects: self.game.n_objects.clone(),
            n_workers: self.workers,
            seed: self.seed,
        }
    }
}
