//! Run configuration: a TOML file with one table per subsystem. Every key
//! has a default; `RunConfig::default()` is the documented baseline and any
//! subset of keys may be overridden in the file.

use std::path::{Path, PathBuf};

use fbee_core::env::EnvSpec;
use fbee_core::explore::ExplorationStrategy;
use fbee_core::fb::FbHyper;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("failed to parse config {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] fbee_core::env::EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run label; output files live in `<out_dir>`.
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub environment: EnvSpec,
    pub fb: FbHyper,
    pub strategy: ExplorationStrategy,
    pub total_env_steps: u64,
    /// Zero-shot evaluation cadence in environment steps; must divide
    /// `total_env_steps` and be a multiple of the episode horizon.
    pub eval_period: u64,
    pub n_eval_episodes: usize,
    /// Reward labels drawn from the buffer for z_R inference.
    pub n_reward_samples: usize,
    pub buffer_capacity: usize,
    /// Gradient steps per environment step.
    pub grad_ratio: f64,
    /// Feed B (and the state part of F inputs) the environment's feature map
    /// instead of one-hot states, when the environment defines one.
    pub use_feature_map: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            out_dir: PathBuf::from("runs/run"),
            environment: EnvSpec::FourRoom {
                side: 11,
                slip_prob: 0.05,
                gamma: 0.98,
                horizon: 100,
            },
            fb: FbHyper::default(),
            strategy: ExplorationStrategy::default(),
            total_env_steps: 150_000,
            eval_period: 5_000,
            n_eval_episodes: 30,
            n_reward_samples: 10_000,
            buffer_capacity: 1_000_000,
            grad_ratio: 0.5,
            use_feature_map: false,
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
            .map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, Box<toml::de::Error>> {
        toml::from_str(text).map_err(Box::new)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every cross-field constraint the run loop depends on; also
    /// builds the environment once to surface construction errors early.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let env = self.environment.build()?;
        self.fb.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.strategy.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if (self.fb.gamma - self.environment.gamma()).abs() > 0.0 {
            return Err(ConfigError::Invalid(format!(
                "fb.gamma ({}) must equal environment gamma ({}); one discount drives both \
                 the TD loss and the oracles",
                self.fb.gamma,
                self.environment.gamma()
            )));
        }
        let horizon = env.episode.horizon as u64;
        if self.eval_period == 0 || self.eval_period % horizon != 0 {
            return Err(ConfigError::Invalid(format!(
                "eval_period ({}) must be a positive multiple of the episode horizon ({horizon})",
                self.eval_period
            )));
        }
        if self.total_env_steps == 0 || self.total_env_steps % self.eval_period != 0 {
            return Err(ConfigError::Invalid(format!(
                "total_env_steps ({}) must be a positive multiple of eval_period ({})",
                self.total_env_steps, self.eval_period
            )));
        }
        if self.n_eval_episodes == 0 {
            return Err(ConfigError::Invalid("n_eval_episodes must be ≥ 1".into()));
        }
        if self.n_reward_samples == 0 {
            return Err(ConfigError::Invalid("n_reward_samples must be ≥ 1".into()));
        }
        if self.buffer_capacity == 0 {
            return Err(ConfigError::Invalid("buffer_capacity must be ≥ 1".into()));
        }
        if !(self.grad_ratio >= 0.0 && self.grad_ratio.is_finite()) {
            return Err(ConfigError::Invalid("grad_ratio must be finite and ≥ 0".into()));
        }
        if self.use_feature_map && env.feature_map.is_none() {
            return Err(ConfigError::Invalid(
                "use_feature_map set but the environment defines no feature map".into(),
            ));
        }
        Ok(())
    }
}
