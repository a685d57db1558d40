//! Expert-referenced rewards: track the expert's speed and track position
//! while keeping the commands smooth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{sample_grid, GpModel, TrajectorySample};
use crate::sim::TerminationKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    #[default]
    Deterministic,
    Stochastic,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(RewardMode::Deterministic),
            "stochastic" => Ok(RewardMode::Stochastic),
            _ => Err(Error::Invalid(format!(
                "unknown reward mode `{s}` (expected deterministic or stochastic)"
            ))),
        }
    }
}

impl std::fmt::Display for RewardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardMode::Deterministic => "deterministic",
            RewardMode::Stochastic => "stochastic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight on |D_ref - D| (per meter).
    pub c1: f64,
    /// Weight on the steering command change.
    pub c2: f64,
    /// Weight on the torque command change.
    pub c3: f64,
    pub termination_penalty: f64,
    pub mode: RewardMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            c1: 20.0,
            c2: 100.0,
            c3: 10.0,
            termination_penalty: -100.0,
            mode: RewardMode::Deterministic,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.c1, self.c2, self.c3].iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Invalid("reward weights must be finite and >= 0".into()));
        }
        if !self.termination_penalty.is_finite() {
            return Err(Error::Invalid("termination penalty must be finite".into()));
        }
        Ok(())
    }
}

/// What the reward sees of one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardInputs {
    pub sigma: f64,
    pub speed_kmh: f64,
    pub lateral: f64,
    /// Scaled commands at t and t-1.
    pub steering: f64,
    pub prev_steering: f64,
    pub torque: f64,
    pub prev_torque: f64,
    pub termination: TerminationKind,
}

/// Reward against explicit reference values (km/h and m).
pub fn reward_against(inputs: &RewardInputs, v_ref: f64, d_ref: f64, cfg: &RewardConfig) -> Result<f64> {
    let i = inputs;
    let vals = [
        i.sigma,
        i.speed_kmh,
        i.lateral,
        i.steering,
        i.prev_steering,
        i.torque,
        i.prev_torque,
        v_ref,
        d_ref,
    ];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reward input".into()));
    }
    if i.termination.is_terminal() {
        return Ok(cfg.termination_penalty);
    }
    Ok((v_ref - (v_ref - i.speed_kmh).abs())
        - cfg.c1 * (d_ref - i.lateral).abs()
        - cfg.c2 * (i.steering - i.prev_steering).abs()
        - cfg.c3 * (i.torque - i.prev_torque).abs())
}

/// Reference profiles on a uniform grid over one lap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertProfile {
    pub lap_length: f64,
    pub grid: Vec<f64>,
    pub mean_d: Vec<f64>,
    pub mean_v: Vec<f64>,
    /// Sampled trajectories, `bank_d[j][i]` at `grid[i]`.
    pub bank_d: Vec<Vec<f64>>,
    pub bank_v: Vec<Vec<f64>>,
}

/// Linear interpolation on a uniform periodic grid over `[0, lap_length)`.
pub fn lookup(values: &[f64], lap_length: f64, sigma: f64) -> f64 {
    let n = values.len();
    let h = lap_length / n as f64;
    let s = sigma.rem_euclid(lap_length);
    let f = s / h;
    let i = (f.floor() as usize).min(n - 1);
    let w = f - i as f64;
    if w == 0.0 {
        return values[i];
    }
    values[i] * (1.0 - w) + values[(i + 1) % n] * w
}

impl ExpertProfile {
    /// Builds the profile from fitted track-position and speed models plus
    /// their sample banks (which must share the lap grid).
    pub fn from_models(
        d_model: &GpModel,
        v_model: &GpModel,
        d_samples: &[TrajectorySample],
        v_samples: &[TrajectorySample],
        lap_length: f64,
    ) -> Result<Self> {
        let grid = sample_grid(lap_length);
        for s in d_samples.iter().chain(v_samples) {
            if s.grid.len() != grid.len()
                || s.grid.iter().zip(&grid).any(|(a, b)| (a - b).abs() > 1e-6)
            {
                return Err(Error::Invalid(format!(
                    "sample {} is not on the {}-point lap grid",
                    s.j,
                    grid.len()
                )));
            }
        }
        let profile = ExpertProfile {
            lap_length,
            mean_d: d_model.posterior_mean(&grid),
            mean_v: v_model.posterior_mean(&grid),
            grid,
            bank_d: d_samples.iter().map(|s| s.values.clone()).collect(),
            bank_v: v_samples.iter().map(|s| s.values.clone()).collect(),
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.len();
        if n == 0 || !(self.lap_length > 0.0) {
            return Err(Error::Invalid("empty expert profile".into()));
        }
        if self.mean_d.len() != n || self.mean_v.len() != n {
            return Err(Error::Dimension {
                what: "profile means",
                expected: n,
                got: self.mean_d.len().min(self.mean_v.len()),
            });
        }
        if self.bank_d.len() != self.bank_v.len() {
            return Err(Error::Invalid(format!(
                "sample banks differ in size: {} vs {}",
                self.bank_d.len(),
                self.bank_v.len()
            )));
        }
        if let Some(b) = self.bank_d.iter().chain(&self.bank_v).find(|b| b.len() != n) {
            return Err(Error::Dimension {
                what: "sample length",
                expected: n,
                got: b.len(),
            });
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.bank_d.len()
    }

    /// `(V_ref km/h, D_ref m)` at `sigma`, from the means or from sample `j`.
    pub fn reference(&self, sigma: f64, sample: Option<usize>) -> Result<(f64, f64)> {
        match sample {
            None => Ok((
                lookup(&self.mean_v, self.lap_length, sigma),
                lookup(&self.mean_d, self.lap_length, sigma),
            )),
            Some(j) => {
                if j >= self.num_samples() {
                    return Err(Error::Invalid(format!(
                        "sample index {j} outside bank of {}",
                        self.num_samples()
                    )));
                }
                Ok((
                    lookup(&self.bank_v[j], self.lap_length, sigma),
                    lookup(&self.bank_d[j], self.lap_length, sigma),
                ))
            }
        }
    }
}

/// Reward against the expert's mean profiles.
pub fn deterministic_reward(inputs: &RewardInputs, profile: &ExpertProfile, cfg: &RewardConfig) -> Result<f64> {
    let (v, d) = profile.reference(inputs.sigma, None)?;
    reward_against(inputs, v, d, cfg)
}

/// Reward against sampled trajectory `j` (fixed for an episode).
pub fn stochastic_reward(
    inputs: &RewardInputs,
    profile: &ExpertProfile,
    j: usize,
    cfg: &RewardConfig,
) -> Result<f64> {
    if profile.num_samples() == 0 {
        return Err(Error::Invalid("stochastic reward needs a nonempty sample bank".into()));
    }
    let (v, d) = profile.reference(inputs.sigma, Some(j))?;
    reward_against(inputs, v, d, cfg)
}
