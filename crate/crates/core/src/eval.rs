//! Policy rollouts, agent-vs-expert distribution comparison and the
//! generalization roads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{collect_demos, DemoLog, ExpertDriver, ExpertParams, Variable};
use crate::gp::{fit_demo, fit_rounds, sample_grid, GpModel};
use crate::io::{fmt_f64, write_atomic, write_json};
use crate::logs::Record;
use crate::nn::{MdnPolicy, ACTION_DIM};
use crate::sim::{Simulator, SimState, TerminationKind, VehicleParams, DT, KMH};
use crate::track::{generate_road, RoadKind, RoadSpec, Track};

pub const DEFAULT_ROUNDS: usize = 7;
pub const MAX_CONSECUTIVE_FAILURES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// Mean of the highest-weight mixture component.
    #[default]
    MeanOnly,
    /// A draw from the full mixture.
    Sampled,
}

impl std::str::FromStr for ActionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_only" | "mean" => Ok(ActionMode::MeanOnly),
            "sampled" => Ok(ActionMode::Sampled),
            _ => Err(Error::Invalid(format!("unknown mode `{s}` (expected mean_only or sampled)"))),
        }
    }
}

impl std::fmt::Display for ActionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActionMode::MeanOnly => "mean_only",
            ActionMode::Sampled => "sampled",
        })
    }
}

/// Anything that maps an observation (and, for scripted drivers, the state)
/// to raw commands.
pub trait Controller {
    fn act(&mut self, obs: &[f64], state: &SimState, rng: &mut ChaCha8Rng) -> Result<[f64; ACTION_DIM]>;
}

pub struct PolicyController<'a> {
    pub policy: &'a MdnPolicy,
    pub mode: ActionMode,
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, obs: &[f64], _: &SimState, rng: &mut ChaCha8Rng) -> Result<[f64; ACTION_DIM]> {
        let (dist, _) = self.policy.evaluate(obs)?;
        Ok(match self.mode {
            ActionMode::MeanOnly => dist.dominant_mean(),
            ActionMode::Sampled => dist.sample(rng),
        })
    }
}

impl<F> Controller for F
where
    F: FnMut(&[f64], &SimState) -> [f64; ACTION_DIM],
{
    fn act(&mut self, obs: &[f64], state: &SimState, _: &mut ChaCha8Rng) -> Result<[f64; ACTION_DIM]> {
        Ok(self(obs, state))
    }
}

/// The scripted expert as a controller, drawing its noise from the rollout's
/// random stream.
pub struct ExpertController {
    pub driver: ExpertDriver,
    pub track: Arc<Track>,
}

impl ExpertController {
    pub fn new(params: ExpertParams, track: Arc<Track>) -> Self {
        ExpertController {
            driver: ExpertDriver::new(params),
            track,
        }
    }
}

impl Controller for ExpertController {
    fn act(&mut self, _: &[f64], state: &SimState, rng: &mut ChaCha8Rng) -> Result<[f64; ACTION_DIM]> {
        let a = self.driver.act(state, &self.track, rng);
        Ok([a.steering, a.torque])
    }
}

/// Safety counters over a set of episodes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SafetyStats {
    pub episodes: usize,
    pub completed_laps: usize,
    /// Episodes ended by a termination or the step cap.
    pub failed_episodes: usize,
    pub terminations: BTreeMap<String, usize>,
    pub obstacles_passed: usize,
    pub collisions: usize,
}

impl SafetyStats {
    /// Collisions per obstacle encountered (passed or hit).
    pub fn collision_rate(&self) -> f64 {
        let n = self.obstacles_passed + self.collisions;
        if n == 0 {
            0.0
        } else {
            self.collisions as f64 / n as f64
        }
    }

    /// Completed laps over attempted laps (each failure aborts one attempt).
    pub fn completion_rate(&self) -> f64 {
        let n = self.completed_laps + self.failed_episodes;
        if n == 0 {
            0.0
        } else {
            self.completed_laps as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub steps: usize,
    pub laps: usize,
    pub termination: TerminationKind,
}

/// Lap-segmented agent driving.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub track_id: String,
    pub lap_length: f64,
    pub mode: ActionMode,
    pub laps: Vec<Vec<Record>>,
    /// Records of the unfinished lap of each failed episode.
    pub partial: Vec<Vec<Record>>,
    pub episodes: Vec<EpisodeSummary>,
    pub safety: SafetyStats,
    /// Stopped after too many consecutive failed episodes.
    pub aborted: bool,
}

impl Rollout {
    /// The laps as a demo log, so agent driving feeds the same GP pipeline.
    pub fn as_demo(&self, seed: u64) -> DemoLog {
        DemoLog {
            driver_id: format!("agent-{}", self.mode),
            track_id: self.track_id.clone(),
            seed,
            rounds: self.laps.clone(),
        }
    }
}

/// Number of obstacle arc lengths crossed going from absolute position `a0`
/// to `a1` (both unwrapped).
fn crossings(track: &Track, a0: f64, a1: f64) -> usize {
    let l = track.total_length;
    track
        .obstacles
        .iter()
        .map(|o| {
            let k = ((a1 - o.arc_length) / l).floor() - ((a0 - o.arc_length) / l).floor();
            k.max(0.0) as usize
        })
        .sum()
}

/// Per-lap step cap: a lap at the too-slow threshold, doubled.
fn lap_step_cap(track: &Track) -> usize {
    (2.0 * track.total_length / (5.0 * KMH) / DT) as usize + 100
}

struct EpisodeOutcome {
    laps: Vec<Vec<Record>>,
    partial: Vec<Record>,
    summary: EpisodeSummary,
    passed: usize,
}

/// One episode from a reference-state reset, stopping after `max_laps` laps
/// or a termination.
fn run_episode<C: Controller + ?Sized>(
    sim: &mut Simulator,
    ctrl: &mut C,
    max_laps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeOutcome> {
    let mut obs = sim.reset(rng).vector;
    let track = Arc::clone(&sim.track);
    let l = track.total_length;
    let origin = sim.state.arc_length;
    let cap = lap_step_cap(&track) * max_laps;
    let mut laps = Vec::new();
    let mut current = vec![Record::from_state(&sim.state, 0.0, TerminationKind::None)];
    let mut passed = 0;
    let mut steps = 0;
    let mut finished = false;
    let termination = loop {
        let a = ctrl.act(&obs, &sim.state, rng)?;
        let before = origin + sim.state.progress;
        let (o, kind) = sim.step(crate::sim::Action::new(a[0], a[1]))?;
        obs = o.vector;
        steps += 1;
        let s = &sim.state;
        if kind.is_terminal() {
            current.push(Record::from_state(s, s.elapsed(), kind));
            break kind;
        }
        passed += crossings(&track, before, origin + s.progress);
        let lap = (s.progress / l).floor().max(0.0) as usize;
        if lap > laps.len() {
            laps.push(std::mem::take(&mut current));
            if laps.len() == max_laps {
                finished = true;
                break TerminationKind::None;
            }
        }
        current.push(Record::from_state(s, s.elapsed(), kind));
        if steps >= cap {
            break TerminationKind::None;
        }
    };
    Ok(EpisodeOutcome {
        summary: EpisodeSummary {
            steps,
            laps: laps.len(),
            termination,
        },
        laps,
        partial: if finished { Vec::new() } else { current },
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub rounds: usize,
    pub mode: ActionMode,
    pub seed: u64,
    pub max_failures: usize,
    #[serde(default)]
    pub vehicle: VehicleParams,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            rounds: DEFAULT_ROUNDS,
            mode: ActionMode::MeanOnly,
            seed: 0,
            max_failures: MAX_CONSECUTIVE_FAILURES,
            vehicle: VehicleParams::default(),
        }
    }
}

/// Drives until `rounds` complete laps are logged, restarting after failures.
/// Never errors on failure loops; check `aborted`.
pub fn drive<C: Controller + ?Sized>(
    track: Arc<Track>,
    ctrl: &mut C,
    opts: &RolloutOptions,
) -> Result<Rollout> {
    if opts.rounds == 0 {
        return Err(Error::Invalid("rounds must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let state = crate::sim::place(&track, 0.0, 3.0, 0.0);
    let mut sim = Simulator::new(Arc::clone(&track), opts.vehicle.clone(), state);
    let mut out = Rollout {
        track_id: track.id.clone(),
        lap_length: track.total_length,
        mode: opts.mode,
        laps: Vec::new(),
        partial: Vec::new(),
        episodes: Vec::new(),
        safety: SafetyStats::default(),
        aborted: false,
    };
    let mut consecutive = 0;
    while out.laps.len() < opts.rounds {
        let ep = run_episode(&mut sim, ctrl, opts.rounds - out.laps.len(), &mut rng)?;
        let st = &mut out.safety;
        st.episodes += 1;
        st.completed_laps += ep.laps.len();
        st.obstacles_passed += ep.passed;
        let failed = ep.laps.len() < opts.rounds - out.laps.len();
        if failed {
            st.failed_episodes += 1;
            let key = if ep.summary.termination.is_terminal() {
                ep.summary.termination.to_string()
            } else {
                "step_cap".to_string()
            };
            *st.terminations.entry(key).or_default() += 1;
            if ep.summary.termination == TerminationKind::ObstacleCollision {
                st.collisions += 1;
            }
        }
        consecutive = if ep.laps.is_empty() { consecutive + 1 } else { 0 };
        out.laps.extend(ep.laps);
        if !ep.partial.is_empty() {
            out.partial.push(ep.partial);
        }
        out.episodes.push(ep.summary);
        if consecutive > opts.max_failures {
            out.aborted = true;
            break;
        }
    }
    Ok(out)
}

/// Like [`drive`], but a failure loop is an error carrying the diagnostics.
pub fn rollout(policy: &MdnPolicy, track: Arc<Track>, opts: &RolloutOptions) -> Result<Rollout> {
    let mut ctrl = PolicyController {
        policy,
        mode: opts.mode,
    };
    let r = drive(track, &mut ctrl, opts)?;
    if r.aborted {
        let recent: Vec<String> = r
            .episodes
            .iter()
            .rev()
            .take(5)
            .map(|e| format!("{} after {} steps", e.termination, e.steps))
            .collect();
        return Err(Error::Rollout(format!(
            "{} consecutive episodes ended without a lap ({} laps of {} logged); last: {}",
            opts.max_failures + 1,
            r.laps.len(),
            opts.rounds,
            recent.join(", ")
        )));
    }
    Ok(r)
}

/// Fraction of independent reference-state episodes that complete two laps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionStats {
    pub episodes: usize,
    pub completed: usize,
    pub terminations: BTreeMap<String, usize>,
}

impl CompletionStats {
    pub fn rate(&self) -> f64 {
        self.completed as f64 / self.episodes.max(1) as f64
    }
}

pub fn two_lap_completion(
    policy: &MdnPolicy,
    track: Arc<Track>,
    episodes: usize,
    mode: ActionMode,
    seed: u64,
) -> Result<CompletionStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = crate::sim::place(&track, 0.0, 3.0, 0.0);
    let mut sim = Simulator::new(track, VehicleParams::default(), state);
    let mut ctrl = PolicyController { policy, mode };
    let mut st = CompletionStats {
        episodes,
        completed: 0,
        terminations: BTreeMap::new(),
    };
    for _ in 0..episodes {
        let ep = run_episode(&mut sim, &mut ctrl, 2, &mut rng)?;
        if ep.laps.len() == 2 {
            st.completed += 1;
        } else {
            *st.terminations.entry(ep.summary.termination.to_string()).or_default() += 1;
        }
    }
    Ok(st)
}

/// One variable's expert-vs-agent comparison on the lap grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesComparison {
    pub variable: Variable,
    pub expert_mean: Vec<f64>,
    pub expert_lower: Vec<f64>,
    pub expert_upper: Vec<f64>,
    pub agent_mean: Vec<f64>,
    pub agent_lower: Vec<f64>,
    pub agent_upper: Vec<f64>,
    /// Grid averages of the predictive standard deviations.
    pub expert_sd: f64,
    pub agent_sd: f64,
    /// Grid average of |agent mean - expert mean|.
    pub mean_gap: f64,
    /// Fraction of grid points with the agent mean inside the expert band.
    pub in_ci_fraction: f64,
    /// Grid average of per-point band intersection over union.
    pub ci_overlap: f64,
}

pub fn compare_models(variable: Variable, expert: &GpModel, agent: &GpModel, grid: &[f64]) -> SeriesComparison {
    let e = expert.band(grid);
    let a = agent.band(grid);
    let n = grid.len().max(1) as f64;
    let avg = |v: Vec<f64>| v.iter().sum::<f64>() / n;
    let mean_gap = avg(e.mean.iter().zip(&a.mean).map(|(x, y)| (x - y).abs()).collect());
    let inside = (0..grid.len())
        .filter(|&i| a.mean[i] >= e.lower[i] && a.mean[i] <= e.upper[i])
        .count() as f64
        / n;
    let overlap = avg(
        (0..grid.len())
            .map(|i| {
                let inter = (e.upper[i].min(a.upper[i]) - e.lower[i].max(a.lower[i])).max(0.0);
                let union = e.upper[i].max(a.upper[i]) - e.lower[i].min(a.lower[i]);
                if union > 0.0 {
                    inter / union
                } else {
                    1.0
                }
            })
            .collect(),
    );
    SeriesComparison {
        variable,
        expert_sd: avg(expert.predictive_std(grid)),
        agent_sd: avg(agent.predictive_std(grid)),
        expert_mean: e.mean,
        expert_lower: e.lower,
        expert_upper: e.upper,
        agent_mean: a.mean,
        agent_lower: a.lower,
        agent_upper: a.upper,
        mean_gap,
        in_ci_fraction: inside,
        ci_overlap: overlap,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub track_id: String,
    pub lap_length: f64,
    pub grid: Vec<f64>,
    pub trackpos: SeriesComparison,
    pub speed: SeriesComparison,
    pub safety: Option<SafetyStats>,
}

/// Fits agent GPs on `agent` laps and compares them with the expert models.
pub fn compare(expert_d: &GpModel, expert_v: &GpModel, agent: &DemoLog, lap_length: f64) -> Result<ComparisonReport> {
    if agent.rounds.iter().all(|r| r.is_empty()) {
        return Err(Error::Invalid("agent log has no records".into()));
    }
    for m in [expert_d, expert_v] {
        if (m.info.lap_length - lap_length).abs() > 1e-6 * lap_length {
            return Err(Error::Invalid(format!(
                "expert model lap length {} differs from {lap_length}",
                m.info.lap_length
            )));
        }
    }
    let agent_d = fit_demo(agent, Variable::Trackpos, lap_length)?;
    let agent_v = fit_demo(agent, Variable::Speed, lap_length)?;
    Ok(compare_fitted(expert_d, expert_v, &agent_d, &agent_v, &agent.track_id, lap_length))
}

pub fn compare_fitted(
    expert_d: &GpModel,
    expert_v: &GpModel,
    agent_d: &GpModel,
    agent_v: &GpModel,
    track_id: &str,
    lap_length: f64,
) -> ComparisonReport {
    let grid = sample_grid(lap_length);
    ComparisonReport {
        track_id: track_id.to_string(),
        lap_length,
        trackpos: compare_models(Variable::Trackpos, expert_d, agent_d, &grid),
        speed: compare_models(Variable::Speed, expert_v, agent_v, &grid),
        grid,
        safety: None,
    }
}

pub const REPORT_COLUMNS: [&str; 13] = [
    "sigma",
    "D_expert_mean",
    "D_expert_lower",
    "D_expert_upper",
    "D_agent_mean",
    "D_agent_lower",
    "D_agent_upper",
    "V_expert_mean",
    "V_expert_lower",
    "V_expert_upper",
    "V_agent_mean",
    "V_agent_lower",
    "V_agent_upper",
];

impl ComparisonReport {
    /// Plot-ready table: one row per grid point.
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        let (d, v) = (&self.trackpos, &self.speed);
        for i in 0..self.grid.len() {
            let row = [
                self.grid[i],
                d.expert_mean[i],
                d.expert_lower[i],
                d.expert_upper[i],
                d.agent_mean[i],
                d.agent_lower[i],
                d.agent_upper[i],
                v.expert_mean[i],
                v.expert_lower[i],
                v.expert_upper[i],
                v.agent_mean[i],
                v.agent_lower[i],
                v.agent_upper[i],
            ];
            let cells: Vec<String> = row.iter().map(|x| fmt_f64(*x)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "track {} ({:.1} m, {} grid points)", self.track_id, self.lap_length, self.grid.len());
        for (name, unit, c) in [("D", "m", &self.trackpos), ("V", "km/h", &self.speed)] {
            let _ = writeln!(
                s,
                "{name}: mean gap {:.3} {unit}, agent mean in expert CI {:.1}%, CI overlap {:.3}, sd expert {:.3} agent {:.3}",
                c.mean_gap,
                100.0 * c.in_ci_fraction,
                c.ci_overlap,
                c.expert_sd,
                c.agent_sd
            );
        }
        if let Some(st) = &self.safety {
            let _ = writeln!(
                s,
                "safety: {} episodes, {} laps, completion {:.1}%, collision rate {:.3}, terminations {:?}",
                st.episodes,
                st.completed_laps,
                100.0 * st.completion_rate(),
                st.collision_rate(),
                st.terminations
            );
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        write_json(&stem.with_extension("json"), self)?;
        write_atomic(&stem.with_extension("csv"), self.to_csv().as_bytes())
    }
}

/// Per-road result of the generalization suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadReport {
    pub kind: RoadKind,
    pub track_id: String,
    pub length: f64,
    pub safety: SafetyStats,
    /// Absent when the agent completed no lap.
    pub comparison: Option<ComparisonReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub length: f64,
    pub expert_rounds: usize,
    pub rollout: RolloutOptions,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            length: crate::track::GENERALIZATION_LENGTH,
            expert_rounds: 8,
            rollout: RolloutOptions::default(),
        }
    }
}

pub const GENERALIZATION_ROADS: [RoadKind; 3] =
    [RoadKind::Alternating50m, RoadKind::GaussianSpaced, RoadKind::GaussianBatched];

/// Drives `ctrl` on each generated road and compares against the scripted
/// expert on the same road.
pub fn generalization_suite<C: Controller + ?Sized>(
    ctrl: &mut C,
    seed: u64,
    opts: &SuiteOptions,
) -> Result<Vec<RoadReport>> {
    let mut out = Vec::new();
    for kind in GENERALIZATION_ROADS {
        let track = Arc::new(generate_road(&RoadSpec::new(kind, seed).with_length(opts.length))?);
        let r = drive(Arc::clone(&track), ctrl, &opts.rollout)?;
        let comparison = if r.laps.is_empty() {
            None
        } else {
            let demo = collect_demos(&track, opts.expert_rounds, seed)?;
            let lap = track.total_length;
            let ed = fit_demo(&demo, Variable::Trackpos, lap)?;
            let ev = fit_demo(&demo, Variable::Speed, lap)?;
            let mut rep = compare(&ed, &ev, &r.as_demo(opts.rollout.seed), lap)?;
            rep.safety = Some(r.safety.clone());
            Some(rep)
        };
        out.push(RoadReport {
            kind,
            track_id: track.id.clone(),
            length: track.total_length,
            safety: r.safety,
            comparison,
        });
    }
    Ok(out)
}

/// Safety table for the suite, one row per road.
pub fn safety_table(reports: &[RoadReport]) -> String {
    let mut s = String::from("road,length,episodes,laps,completion_rate,collision_rate,obstacles_passed,collisions\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.kind,
            fmt_f64(r.length),
            r.safety.episodes,
            r.safety.completed_laps,
            fmt_f64(r.safety.completion_rate()),
            fmt_f64(r.safety.collision_rate()),
            r.safety.obstacles_passed,
            r.safety.collisions
        );
    }
    s
}

/// Fits GPs to rollout laps directly (no expert needed).
pub fn fit_rollout(r: &Rollout, variable: Variable) -> Result<GpModel> {
    let rounds: Vec<Vec<(f64, f64)>> = r
        .laps
        .iter()
        .map(|lap| lap.iter().map(|rec| (rec.sigma, variable.of(rec))).collect())
        .collect();
    fit_rounds(&rounds, variable, &r.track_id, r.lap_length)
}
