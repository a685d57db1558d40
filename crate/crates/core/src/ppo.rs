//! Proximal policy optimization for the mixture-density policy, with the
//! dynamic batch size rule and a driving environment wrapper.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, AdamState, Grads, MdnDistribution, MdnGrad, MdnPolicy, ACTION_DIM, ACTOR_OUT, COMPONENTS};
use crate::reward::{reward_against, ExpertProfile, RewardConfig, RewardInputs, RewardMode};
use crate::sim::{Action, Simulator, TerminationKind, VehicleParams, MAX_STEER};
use crate::track::Track;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub actors: usize,
    pub lr: f64,
    pub initial_batch: usize,
    pub minibatch: usize,
    pub normalize_advantages: bool,
    /// Multiplies rewards before they reach the learner; logged returns stay raw.
    pub reward_scale: f64,
    pub hidden: Vec<usize>,
    pub total_steps: u64,
    /// Checkpoint period in updates (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.98,
            lambda: 0.95,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.005,
            epochs: 5,
            actors: 1,
            lr: 3e-4,
            initial_batch: 512,
            minibatch: 256,
            normalize_advantages: true,
            reward_scale: 1.0,
            hidden: vec![600, 600],
            total_steps: 1_000_000,
            checkpoint_every: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if self.minibatch == 0 || self.initial_batch == 0 || !self.initial_batch.is_multiple_of(self.minibatch) {
            return bad(format!(
                "initial batch {} must be a positive multiple of minibatch {}",
                self.initial_batch, self.minibatch
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.actors != 1 {
            return bad(format!("only one actor is supported, got {}", self.actors));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad(format!("reward scale must be positive, got {}", self.reward_scale));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be nonempty and positive".into());
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("loss coefficients must be >= 0".into());
        }
        Ok(())
    }
}

/// Advantages and returns. `dones[t]` marks a terminal transition (no
/// bootstrap); the step after the last one is valued at `bootstrap`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n);
    assert_eq!(dones.len(), n);
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Zero mean, unit variance (left as-is when the spread vanishes).
pub fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    if v.len() < 2 {
        return;
    }
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    for x in v.iter_mut() {
        *x = (*x - m) / (sd + 1e-8);
    }
}

/// Algorithm 1's dynamic batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchScheduler {
    pub batch: usize,
    pub minibatch: usize,
    pub max_length: usize,
}

impl BatchScheduler {
    pub fn new(batch: usize, minibatch: usize) -> Self {
        BatchScheduler {
            batch,
            minibatch,
            max_length: 0,
        }
    }

    /// Records an episode reaching `step` steps. Grows the batch to roughly
    /// twice the longest episode, as a multiple of the minibatch size.
    pub fn observe(&mut self, step: usize) {
        if step > self.max_length {
            self.max_length = step;
            let rem = (2 * self.max_length) % self.minibatch;
            self.batch = self.batch.max(2 * self.max_length - rem);
        }
    }

    /// Update trigger for a memory holding `memory` transitions.
    pub fn should_update(&self, memory: usize, completed_rounds: bool) -> bool {
        completed_rounds || (memory > 0 && memory.is_multiple_of(self.batch))
    }
}

/// Transitions gathered under one parameter snapshot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub obs_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
}

impl RolloutBuffer {
    pub fn new(obs_dim: usize) -> Self {
        RolloutBuffer {
            obs_dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, obs: &[f64], action: [f64; ACTION_DIM], log_prob: f64, reward: f64, value: f64, done: bool) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        self.obs.extend_from_slice(obs);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.dones.push(done);
    }

    pub fn clear(&mut self) {
        let d = self.obs_dim;
        *self = RolloutBuffer::new(d);
    }
}

/// A learning batch with frozen rollout-time quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub obs: Vec<f64>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn gather(buf: &RolloutBuffer, adv: &[f64], ret: &[f64], idx: &[usize]) -> Self {
        let d = buf.obs_dim;
        Minibatch {
            obs: idx.iter().flat_map(|&i| buf.obs[i * d..(i + 1) * d].iter().copied()).collect(),
            actions: idx.iter().map(|&i| buf.actions[i]).collect(),
            old_log_probs: idx.iter().map(|&i| buf.log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| adv[i]).collect(),
            returns: idx.iter().map(|&i| ret[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

/// Gradients for actor, critic and mixing networks.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub actor: Grads,
    pub critic: Grads,
    pub mixing: Grads,
}

impl PolicyGrads {
    pub fn flat(&self) -> Vec<f64> {
        [&self.actor, &self.critic, &self.mixing]
            .iter()
            .flat_map(|g| g.flat())
            .collect()
    }
}

/// Clipped surrogate term `min(rho * A, clip(rho) * A)` and whether the
/// unclipped branch is the active one.
pub fn clipped_term(ratio: f64, adv: f64, eps: f64) -> (f64, bool) {
    let a = ratio * adv;
    let b = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if a <= b {
        (a, true)
    } else {
        (b, false)
    }
}

/// Loss value only, for checks and diagnostics.
pub fn ppo_loss_value(policy: &MdnPolicy, batch: &Minibatch, cfg: &PpoConfig) -> Result<LossParts> {
    loss_impl(policy, batch, cfg, false).map(|(l, _)| l)
}

/// `-E[min(rho A, clip(rho) A)] + c_v E[(V - R)^2] - c_e E[H]` and its gradients.
pub fn ppo_loss(policy: &MdnPolicy, batch: &Minibatch, cfg: &PpoConfig) -> Result<(LossParts, PolicyGrads)> {
    loss_impl(policy, batch, cfg, true).map(|(l, g)| (l, g.expect("requested")))
}

fn loss_impl(
    policy: &MdnPolicy,
    batch: &Minibatch,
    cfg: &PpoConfig,
    want_grads: bool,
) -> Result<(LossParts, Option<PolicyGrads>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Invalid("empty minibatch".into()));
    }
    let nf = n as f64;
    let ta = policy.actor.forward(&batch.obs, n)?;
    let tm = policy.mixing.forward(&batch.obs, n)?;
    let tc = policy.critic.forward(&batch.obs, n)?;
    let (ya, ym, yc) = (ta.output(), tm.output(), tc.output());

    let mut parts = LossParts::default();
    let mut da = vec![0.0; n * ACTOR_OUT];
    let mut dm = vec![0.0; n * COMPONENTS];
    let mut dc = vec![0.0; n];
    for i in 0..n {
        let (dist, clamped) = MdnDistribution::from_outputs(
            &ya[i * ACTOR_OUT..(i + 1) * ACTOR_OUT],
            &ym[i * COMPONENTS..(i + 1) * COMPONENTS],
        );
        let (lp, glp, _) = dist.log_prob_grad(batch.actions[i]);
        let ratio = (lp - batch.old_log_probs[i]).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite(format!("probability ratio at sample {i}")));
        }
        let adv = batch.advantages[i];
        let (term, active) = clipped_term(ratio, adv, cfg.clip);
        parts.policy -= term / nf;

        let v = yc[i];
        let err = v - batch.returns[i];
        parts.value += err * err / nf;

        let (h, gh) = if want_grads && cfg.entropy_coef > 0.0 {
            dist.entropy_grad()
        } else {
            (dist.entropy(), MdnGrad::default())
        };
        parts.entropy += h / nf;

        if want_grads {
            let mut g = MdnGrad::default();
            let k_lp = if active { -ratio * adv / nf } else { 0.0 };
            let k_h = -cfg.entropy_coef / nf;
            for c in 0..COMPONENTS {
                g.alpha[c] = k_lp * glp.alpha[c] + k_h * gh.alpha[c];
                for d in 0..ACTION_DIM {
                    g.mu[c][d] = k_lp * glp.mu[c][d] + k_h * gh.mu[c][d];
                    g.var[c][d] = k_lp * glp.var[c][d] + k_h * gh.var[c][d];
                }
            }
            let (a_out, m_out) = g.to_outputs(&clamped);
            da[i * ACTOR_OUT..(i + 1) * ACTOR_OUT].copy_from_slice(&a_out);
            dm[i * COMPONENTS..(i + 1) * COMPONENTS].copy_from_slice(&m_out);
            dc[i] = 2.0 * cfg.value_coef * err / nf;
        }
    }
    parts.total = parts.policy + cfg.value_coef * parts.value - cfg.entropy_coef * parts.entropy;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {parts:?}")));
    }
    let grads = if want_grads {
        Some(PolicyGrads {
            actor: policy.actor.backward(&ta, &da)?,
            critic: policy.critic.backward(&tc, &dc)?,
            mixing: policy.mixing.backward(&tm, &dm)?,
        })
    } else {
        None
    };
    Ok((parts, grads))
}

/// One environment transition as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    /// Raw (unscaled) reward.
    pub reward: f64,
    /// Episode ended without bootstrap.
    pub done: bool,
    pub termination: TerminationKind,
    /// Two full rounds completed since reset.
    pub completed_rounds: bool,
}

pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Takes the unclamped policy draw; the environment clamps it.
    fn step(&mut self, action: [f64; ACTION_DIM]) -> Result<StepOutcome>;
}

/// The driving task with an expert-referenced reward.
pub struct DrivingEnv {
    pub sim: Simulator,
    pub profile: Arc<ExpertProfile>,
    pub reward: RewardConfig,
    /// Active sample index in stochastic mode.
    pub sample: Option<usize>,
    prev_command: [f64; ACTION_DIM],
    start_progress: f64,
    rounds: f64,
}

impl DrivingEnv {
    pub fn new(track: Arc<Track>, profile: Arc<ExpertProfile>, reward: RewardConfig) -> Result<Self> {
        profile.validate()?;
        reward.validate()?;
        if reward.mode == RewardMode::Stochastic && profile.num_samples() == 0 {
            return Err(Error::Invalid("stochastic reward needs a nonempty sample bank".into()));
        }
        if (profile.lap_length - track.total_length).abs() > 1e-6 * track.total_length.max(1.0) {
            return Err(Error::Invalid(format!(
                "profile lap length {} does not match track length {}",
                profile.lap_length, track.total_length
            )));
        }
        let state = crate::sim::place(&track, 0.0, 3.0, 0.0);
        Ok(DrivingEnv {
            sim: Simulator::new(track, VehicleParams::default(), state),
            profile,
            reward,
            sample: None,
            prev_command: [0.0; ACTION_DIM],
            start_progress: 0.0,
            rounds: 2.0,
        })
    }
}

impl Environment for DrivingEnv {
    fn obs_dim(&self) -> usize {
        crate::sim::OBS_DIM
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let obs = self.sim.reset(rng);
        self.sample = match self.reward.mode {
            RewardMode::Deterministic => None,
            RewardMode::Stochastic => Some(rng.random_range(0..self.profile.num_samples())),
        };
        let s = &self.sim.state;
        self.prev_command = [s.steering / MAX_STEER, s.torque];
        self.start_progress = s.progress;
        obs.vector
    }

    fn step(&mut self, action: [f64; ACTION_DIM]) -> Result<StepOutcome> {
        let act = Action::new(action[0], action[1]).clamped();
        let (obs, termination) = self.sim.step(act)?;
        let s = &self.sim.state;
        let (v_ref, d_ref) = self.profile.reference(s.arc_length, self.sample)?;
        let inputs = RewardInputs {
            sigma: s.arc_length,
            speed_kmh: s.speed_kmh(),
            lateral: s.lateral,
            steering: act.steering,
            prev_steering: self.prev_command[0],
            torque: act.torque,
            prev_torque: self.prev_command[1],
            termination,
        };
        let reward = reward_against(&inputs, v_ref, d_ref, &self.reward)?;
        self.prev_command = [act.steering, act.torque];
        let completed = s.progress - self.start_progress >= self.rounds * self.sim.track.total_length;
        Ok(StepOutcome {
            obs: obs.vector,
            reward,
            done: termination.is_terminal(),
            termination,
            completed_rounds: completed,
        })
    }
}

/// Per-update training log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub update: usize,
    pub steps: u64,
    pub batch: usize,
    pub mean_return: f64,
    pub mean_ep_len: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Episodes in this batch that ended by completing two rounds.
    pub completed: usize,
    pub episodes: usize,
}

pub const METRICS_HEADER: &str = "update,steps,B,mean_return,mean_ep_len,policy_loss,value_loss,entropy,completed,episodes";

impl UpdateMetrics {
    pub fn csv_row(&self) -> String {
        use crate::io::fmt_f64;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.update,
            self.steps,
            self.batch,
            fmt_f64(self.mean_return),
            fmt_f64(self.mean_ep_len),
            fmt_f64(self.policy_loss),
            fmt_f64(self.value_loss),
            fmt_f64(self.entropy),
            self.completed,
            self.episodes
        )
    }
}

pub fn metrics_csv(rows: &[UpdateMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Learner state: policy, optimizer moments, scheduler, random stream.
pub struct Trainer {
    pub cfg: PpoConfig,
    pub policy: MdnPolicy,
    adam: [AdamState; 3],
    pub scheduler: BatchScheduler,
    rng: ChaCha8Rng,
    pub steps: u64,
    pub updates: usize,
}

impl Trainer {
    pub fn new(cfg: PpoConfig, obs_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let policy = MdnPolicy::new(obs_dim, &cfg.hidden, seed);
        Ok(Self::with_policy(cfg, policy, seed))
    }

    pub fn with_policy(cfg: PpoConfig, policy: MdnPolicy, seed: u64) -> Self {
        let adam = [
            AdamState::new(&policy.actor),
            AdamState::new(&policy.critic),
            AdamState::new(&policy.mixing),
        ];
        Trainer {
            scheduler: BatchScheduler::new(cfg.initial_batch, cfg.minibatch),
            cfg,
            policy,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e),
            steps: 0,
            updates: 0,
        }
    }

    fn adam_cfg(&self) -> AdamConfig {
        AdamConfig {
            lr: self.cfg.lr,
            ..AdamConfig::default()
        }
    }

    /// Runs until `total_steps` environment steps, calling `on_update` after
    /// each policy update. The environment is reset after every update.
    pub fn train<E: Environment>(
        &mut self,
        env: &mut E,
        mut on_update: impl FnMut(&UpdateMetrics, &MdnPolicy) -> Result<()>,
    ) -> Result<Vec<UpdateMetrics>> {
        let mut log = Vec::new();
        let mut buf = RolloutBuffer::new(env.obs_dim());
        let mut obs = env.reset(&mut self.rng);
        let mut ep_len = 0usize;
        let mut ep_return = 0.0;
        let mut finished: Vec<(f64, usize)> = Vec::new();
        let mut completed = 0usize;
        while self.steps < self.cfg.total_steps {
            let (dist, value) = self.policy.evaluate(&obs)?;
            let a = dist.sample(&mut self.rng);
            let lp = dist.log_prob(a);
            let out = env.step(a)?;
            self.steps += 1;
            ep_len += 1;
            ep_return += out.reward;
            self.scheduler.observe(ep_len);
            let terminal = out.done;
            buf.push(&obs, a, lp, out.reward * self.cfg.reward_scale, value, terminal);
            obs = out.obs;
            if terminal {
                finished.push((ep_return, ep_len));
                ep_len = 0;
                ep_return = 0.0;
                obs = env.reset(&mut self.rng);
            }
            let budget_done = self.steps >= self.cfg.total_steps;
            if self.scheduler.should_update(buf.len(), out.completed_rounds) || budget_done {
                if out.completed_rounds && !terminal {
                    completed += 1;
                    finished.push((ep_return, ep_len));
                }
                let bootstrap = if terminal { 0.0 } else { self.policy.value(&obs)? };
                let (pl, vl, ent) = self.update(&buf, bootstrap)?;
                if finished.is_empty() {
                    finished.push((ep_return, ep_len));
                }
                let m = UpdateMetrics {
                    update: self.updates,
                    steps: self.steps,
                    batch: self.scheduler.batch,
                    mean_return: finished.iter().map(|f| f.0).sum::<f64>() / finished.len() as f64,
                    mean_ep_len: finished.iter().map(|f| f.1 as f64).sum::<f64>() / finished.len() as f64,
                    policy_loss: pl,
                    value_loss: vl,
                    entropy: ent,
                    completed,
                    episodes: finished.len(),
                };
                on_update(&m, &self.policy)?;
                log.push(m);
                buf.clear();
                finished.clear();
                completed = 0;
                ep_len = 0;
                ep_return = 0.0;
                obs = env.reset(&mut self.rng);
            }
        }
        Ok(log)
    }

    /// `epochs` passes of shuffled minibatches over one buffer. Returns the
    /// mean policy loss, value loss and entropy of the last epoch.
    pub fn update(&mut self, buf: &RolloutBuffer, bootstrap: f64) -> Result<(f64, f64, f64)> {
        let (mut adv, ret) = compute_gae(
            &buf.rewards,
            &buf.values,
            bootstrap,
            &buf.dones,
            self.cfg.gamma,
            self.cfg.lambda,
        );
        if self.cfg.normalize_advantages {
            normalize(&mut adv);
        }
        let mut idx: Vec<usize> = (0..buf.len()).collect();
        let adam_cfg = self.adam_cfg();
        let mut last = (0.0, 0.0, 0.0);
        for _ in 0..self.cfg.epochs {
            idx.shuffle(&mut self.rng);
            let mut sums = (0.0, 0.0, 0.0);
            let mut count = 0.0;
            for chunk in idx.chunks(self.cfg.minibatch) {
                let mb = Minibatch::gather(buf, &adv, &ret, chunk);
                let (parts, g) = ppo_loss(&self.policy, &mb, &self.cfg).map_err(|e| {
                    Error::Numerical(format!("update {} diverged: {e}", self.updates))
                })?;
                let [a, c, m] = &mut self.adam;
                adam_step(&mut self.policy.actor, &g.actor, a, &adam_cfg);
                adam_step(&mut self.policy.critic, &g.critic, c, &adam_cfg);
                adam_step(&mut self.policy.mixing, &g.mixing, m, &adam_cfg);
                let w = chunk.len() as f64;
                sums.0 += parts.policy * w;
                sums.1 += parts.value * w;
                sums.2 += parts.entropy * w;
                count += w;
            }
            last = (sums.0 / count, sums.1 / count, sums.2 / count);
        }
        if self
            .policy
            .nets()
            .iter()
            .any(|n| n.layers.iter().any(|l| l.w.iter().chain(&l.b).any(|v| !v.is_finite())))
        {
            return Err(Error::Numerical(format!("update {} produced non-finite parameters", self.updates)));
        }
        self.updates += 1;
        Ok(last)
    }
}
