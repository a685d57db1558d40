//! Run configuration as a TOML file. Every section defaults to the built-in
//! constants, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ActionMode, DEFAULT_ROUNDS, MAX_CONSECUTIVE_FAILURES};
use crate::expert::ExpertParams;
use crate::ppo::PpoConfig;
use crate::reward::RewardConfig;
use crate::sim::VehicleParams;

/// Environment variable naming a config file to use when `--config` is absent.
pub const CONFIG_ENV: &str = "DRIVE_IMITATION_CONFIG";

/// Literal learning rate from the hyperparameter table. It diverges, so it is
/// opt-in only.
pub const TABLE_LR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    /// `training`, `desk`, or `<kind>-<length>-<seed>`.
    pub id: String,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig { id: "training".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub rounds: usize,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig { rounds: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Trajectories drawn per variable for the stochastic reward.
    pub samples: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { samples: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rounds: usize,
    pub mode: ActionMode,
    pub max_failures: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rounds: DEFAULT_ROUNDS,
            mode: ActionMode::MeanOnly,
            max_failures: MAX_CONSECUTIVE_FAILURES,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub track: TrackConfig,
    pub vehicle: VehicleParams,
    pub expert: ExpertParams,
    pub demo: DemoConfig,
    pub sampling: SamplingConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// The reduced setting used for quick runs: desk track, 64-unit layers,
    /// 500k steps.
    pub fn desk() -> Self {
        let mut c = Config::default();
        c.track.id = "desk".into();
        c.ppo.hidden = vec![64, 64];
        c.ppo.total_steps = 500_000;
        c
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    /// Explicit path, else the environment override, else built-in defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Config::default()),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.reward.validate()?;
        if self.demo.rounds == 0 {
            return Err(Error::Invalid("demo.rounds must be >= 1".into()));
        }
        if self.sampling.samples == 0 {
            return Err(Error::Invalid("sampling.samples must be >= 1".into()));
        }
        if self.eval.rounds == 0 || self.eval.max_failures == 0 {
            return Err(Error::Invalid("eval.rounds and eval.max_failures must be >= 1".into()));
        }
        if self.vehicle.substeps == 0 {
            return Err(Error::Invalid("vehicle.substeps must be >= 1".into()));
        }
        Ok(())
    }
}
