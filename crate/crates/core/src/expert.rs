//! Scripted stand-in for the human expert, and the demo log format it shares
//! with recordings from the live-driving session.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_atomic, CsvTable};
use crate::logs::{Record, EPISODE_COLUMNS};
use crate::sim::{self, Action, SimState, TerminationKind, VehicleParams, DT, KMH, MAX_SPEED, MAX_STEER};
use crate::track::{forward_gap, Lane, Track};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertParams {
    /// Lateral offset of the preferred lane (m, positive right).
    pub preferred_lateral: f64,
    pub lookahead_base: f64,
    /// Seconds of travel added to the obstacle lookahead.
    pub lookahead_per_speed: f64,
    pub transition_length: f64,
    pub return_after: f64,
    pub lat_accel_max: f64,
    pub avoidance_speed_factor: f64,
    pub ou_theta: f64,
    pub ou_sigma_lateral: f64,
    pub ou_sigma_speed_kmh: f64,
    pub pursuit_base: f64,
    pub pursuit_per_speed: f64,
    pub speed_gain: f64,
    /// Deceleration used to slow down ahead of curves (m/s^2).
    pub comfort_decel: f64,
}

impl Default for ExpertParams {
    fn default() -> Self {
        ExpertParams {
            preferred_lateral: 3.0,
            lookahead_base: 60.0,
            lookahead_per_speed: 2.0,
            transition_length: 40.0,
            return_after: 30.0,
            lat_accel_max: 3.0,
            avoidance_speed_factor: 0.8,
            ou_theta: 0.3,
            ou_sigma_lateral: 0.3,
            ou_sigma_speed_kmh: 2.0,
            pursuit_base: 8.0,
            pursuit_per_speed: 0.8,
            speed_gain: 0.5,
            comfort_decel: 2.5,
        }
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Transition {
    start: f64,
    from: f64,
    to: f64,
}

/// Per-run driver memory: lane plan and the two Ornstein-Uhlenbeck perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDriver {
    pub params: ExpertParams,
    lane: Lane,
    transition: Option<Transition>,
    pass_until: f64,
    ou_lateral: f64,
    ou_speed_kmh: f64,
}

impl ExpertDriver {
    pub fn new(params: ExpertParams) -> Self {
        ExpertDriver {
            params,
            lane: Lane::Right,
            transition: None,
            pass_until: f64::NEG_INFINITY,
            ou_lateral: 0.0,
            ou_speed_kmh: 0.0,
        }
    }

    fn lane_offset(&self, lane: Lane) -> f64 {
        match lane {
            Lane::Right => self.params.preferred_lateral,
            Lane::Left => -self.params.preferred_lateral,
        }
    }

    /// Planned lateral offset (without noise) at unwrapped progress `p`.
    pub fn planned_lateral(&self, p: f64) -> f64 {
        match self.transition {
            Some(tr) => {
                tr.from
                    + (tr.to - tr.from) * smoothstep((p - tr.start) / self.params.transition_length)
            }
            None => self.lane_offset(self.lane),
        }
    }

    pub fn in_maneuver(&self) -> bool {
        self.transition.is_some() || self.lane != Lane::Right
    }

    fn nearest_ahead(track: &Track, s: f64, lane: Lane) -> Option<f64> {
        track
            .obstacles
            .iter()
            .filter(|o| o.lane == lane)
            .map(|o| forward_gap(s, o.arc_length, track.total_length))
            .min_by(f64::total_cmp)
    }

    fn update_plan(&mut self, track: &Track, state: &SimState) {
        let p = state.progress;
        if let Some(tr) = self.transition {
            if p - tr.start >= self.params.transition_length {
                self.transition = None;
            } else {
                return;
            }
        }
        let lookahead = self.params.lookahead_base + self.params.lookahead_per_speed * state.speed;
        let s = state.arc_length;
        let blocking = Self::nearest_ahead(track, s, self.lane).filter(|g| *g < lookahead);
        match self.lane {
            Lane::Right => {
                if let Some(gap) = blocking {
                    self.begin(p, Lane::Left);
                    self.pass_until = p + gap + self.params.return_after;
                }
            }
            Lane::Left => {
                let right = Self::nearest_ahead(track, s, Lane::Right).filter(|g| *g < lookahead);
                if let Some(gap) = right {
                    self.pass_until = self.pass_until.max(p + gap + self.params.return_after);
                }
                // back right once past, or early if the left lane is blocked
                if right.is_none() && (p >= self.pass_until || blocking.is_some()) {
                    self.begin(p, Lane::Right);
                }
            }
        }
    }

    fn begin(&mut self, p: f64, to: Lane) {
        self.transition = Some(Transition {
            start: p,
            from: self.lane_offset(self.lane),
            to: self.lane_offset(to),
        });
        self.lane = to;
    }

    /// Speed target (m/s) from curvature ahead, before noise.
    pub fn speed_target(&self, track: &Track, s: f64) -> f64 {
        let mut v = MAX_SPEED;
        let mut d = 0.0;
        while d <= 80.0 {
            let k = track.curvature(s + d).abs();
            let vc = if k > 1e-9 {
                (self.params.lat_accel_max / k).sqrt().min(MAX_SPEED)
            } else {
                MAX_SPEED
            };
            v = v.min((vc * vc + 2.0 * self.params.comfort_decel * d).sqrt());
            d += 5.0;
        }
        if self.in_maneuver() {
            v *= self.params.avoidance_speed_factor;
        }
        v
    }

    /// One 10 Hz control decision. Advances the internal noise processes.
    pub fn act<R: Rng + ?Sized>(&mut self, state: &SimState, track: &Track, rng: &mut R) -> Action {
        let prm = &self.params;
        let decay = prm.ou_theta * DT;
        let kick = (2.0 * prm.ou_theta * DT).sqrt();
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        self.ou_lateral += -decay * self.ou_lateral + prm.ou_sigma_lateral * kick * z1;
        self.ou_speed_kmh += -decay * self.ou_speed_kmh + prm.ou_sigma_speed_kmh * kick * z2;

        self.update_plan(track, state);
        let prm = &self.params;

        let preview = prm.pursuit_base + prm.pursuit_per_speed * state.speed;
        let lateral = self.planned_lateral(state.progress + preview) + self.ou_lateral;
        let target = track.point_at(state.arc_length + preview, lateral);
        let to_target = target - state.position;
        let alpha = to_target.angle() - state.heading;
        let curvature = 2.0 * alpha.sin() / to_target.norm().max(1e-6);
        let wheel = (VehicleParams::default().wheelbase * curvature).atan();
        let steering = (wheel / MAX_STEER).clamp(-1.0, 1.0);

        let v_target = (self.speed_target(track, state.arc_length) + self.ou_speed_kmh * KMH)
            .clamp(0.0, MAX_SPEED);
        let torque = (prm.speed_gain * (v_target - state.speed)).clamp(-1.0, 1.0);
        Action::new(steering, torque)
    }
}

/// Expert (or human) demonstrations split into complete rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoLog {
    pub driver_id: String,
    pub track_id: String,
    pub seed: u64,
    pub rounds: Vec<Vec<Record>>,
}

pub const DEMO_COLUMNS_PREFIX: &str = "round";

impl DemoLog {
    pub fn num_records(&self) -> usize {
        self.rounds.iter().map(Vec::len).sum()
    }

    /// All `(sigma, D)` or `(sigma, V_kmh)` pairs across rounds.
    pub fn series(&self, variable: Variable) -> (Vec<f64>, Vec<f64>) {
        self.rounds
            .iter()
            .flatten()
            .map(|r| (r.sigma, variable.of(r)))
            .unzip()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# driver={}", self.driver_id);
        let _ = writeln!(out, "# track={}", self.track_id);
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "{},{}", DEMO_COLUMNS_PREFIX, EPISODE_COLUMNS.join(","));
        for (i, round) in self.rounds.iter().enumerate() {
            for r in round {
                let _ = write!(out, "{i},");
                r.write_fields(&mut out);
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    /// Track position D (m).
    Trackpos,
    /// Speed V (km/h).
    Speed,
}

impl Variable {
    pub fn of(self, r: &Record) -> f64 {
        match self {
            Variable::Trackpos => r.d,
            Variable::Speed => r.v_kmh,
        }
    }
}

impl std::str::FromStr for Variable {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trackpos" => Ok(Variable::Trackpos),
            "speed" => Ok(Variable::Speed),
            _ => Err(Error::Invalid(format!(
                "unknown variable `{s}` (expected trackpos or speed)"
            ))),
        }
    }
}

impl std::fmt::Display for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variable::Trackpos => "trackpos",
            Variable::Speed => "speed",
        })
    }
}

/// Drives the scripted expert for `rounds` full laps from arc length 0,
/// logging every 0.1 s. Any termination is a configuration error.
pub fn collect_demos(track: &Track, rounds: usize, seed: u64) -> Result<DemoLog> {
    collect_demos_with(track, rounds, seed, &ExpertParams::default(), &VehicleParams::default())
}

pub fn collect_demos_with(
    track: &Track,
    rounds: usize,
    seed: u64,
    params: &ExpertParams,
    vehicle: &VehicleParams,
) -> Result<DemoLog> {
    if rounds == 0 {
        return Err(Error::Invalid("rounds must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut driver = ExpertDriver::new(params.clone());
    let lateral = params.preferred_lateral;
    let mut state = sim::place(track, 0.0, lateral, 0.0);
    state.speed = driver.speed_target(track, 0.0);
    let mut log = vec![Vec::new(); rounds];
    log[0].push(Record::from_state(&state, 0.0, TerminationKind::None));
    let goal = rounds as f64 * track.total_length;
    while state.progress < goal {
        let action = driver.act(&state, track, &mut rng);
        let (next, kind) = sim::step(track, vehicle, &state, action, DT)?;
        let t = next.time_step as f64 * DT;
        if kind.is_terminal() {
            return Err(Error::ExpertTerminated {
                kind: kind.to_string(),
                time: t,
                sigma: next.arc_length,
            });
        }
        state = next;
        if state.progress >= goal {
            break;
        }
        let round = (state.progress / track.total_length).floor() as usize;
        log[round].push(Record::from_state(&state, t, kind));
    }
    Ok(DemoLog {
        driver_id: "scripted-expert".into(),
        track_id: track.id.clone(),
        seed,
        rounds: log,
    })
}

/// Reads a demo CSV, validating it against `track`.
pub fn load_demo(path: &Path, track: &Track) -> Result<DemoLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_demo(path, &text, track)
}

pub fn parse_demo(path: &Path, text: &str, track: &Track) -> Result<DemoLog> {
    let table = CsvTable::parse(path, text)?;
    let meta = |key: &str| {
        table
            .comments
            .iter()
            .find_map(|c| c.strip_prefix(&format!("{key}=")).map(str::to_string))
    };
    let track_id = meta("track").unwrap_or_else(|| track.id.clone());
    if track_id != track.id {
        return Err(Error::Invalid(format!(
            "demo recorded on unknown track `{track_id}` (expected `{}`)",
            track.id
        )));
    }
    let bad = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let round_col = table
        .column("round")
        .ok_or_else(|| Error::Invalid(format!("{}: demo has no `round` column", path.display())))?;
    let mut cols = Vec::new();
    for name in EPISODE_COLUMNS {
        cols.push(table.column(name));
    }
    let req = |i: usize| {
        cols[i].ok_or_else(|| {
            Error::Invalid(format!(
                "{}: missing column `{}`",
                path.display(),
                EPISODE_COLUMNS[i]
            ))
        })
    };
    let (ct, cx, cy, cth, cv, cd, cpsi, ctau, cterm) =
        (req(0)?, req(2)?, req(3)?, req(4)?, req(5)?, req(6)?, req(7)?, req(8)?, req(9)?);
    let csigma = cols[1];

    let mut rows: Vec<(usize, Record)> = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let round: usize = row.1[round_col]
            .parse()
            .map_err(|_| bad(row.0, format!("bad round `{}`", row.1[round_col])))?;
        let x = table.f64_at(path, row, cx)?;
        let y = table.f64_at(path, row, cy)?;
        let sigma = match csigma {
            Some(c) => table.f64_at(path, row, c)?,
            None => track
                .project(crate::geom::Vec2::new(x, y))
                .map_err(|e| bad(row.0, e.to_string()))?
                .arc_length,
        };
        let v_kmh = table.f64_at(path, row, cv)?;
        if !(0.0..=100.0 + 1e-9).contains(&v_kmh) {
            return Err(bad(row.0, format!("speed {v_kmh} km/h outside [0, 100]")));
        }
        let termination: TerminationKind = row.1[cterm]
            .parse()
            .map_err(|e: Error| bad(row.0, e.to_string()))?;
        rows.push((
            round,
            Record {
                t: table.f64_at(path, row, ct)?,
                sigma,
                x,
                y,
                theta: table.f64_at(path, row, cth)?,
                v_kmh,
                d: table.f64_at(path, row, cd)?,
                psi_deg: table.f64_at(path, row, cpsi)?,
                tau: table.f64_at(path, row, ctau)?,
                termination,
            },
        ));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.t.total_cmp(&b.1.t)));
    let mut rounds: Vec<Vec<Record>> = Vec::new();
    let mut current = None;
    for (round, r) in rows {
        if current != Some(round) {
            rounds.push(Vec::new());
            current = Some(round);
        }
        let list = rounds.last_mut().expect("pushed");
        if let Some(prev) = list.last() {
            if r.t <= prev.t {
                return Err(Error::Invalid(format!(
                    "{}: non-monotone time {} in round {round}",
                    path.display(),
                    r.t
                )));
            }
        }
        list.push(r);
    }
    if rounds.is_empty() {
        return Err(Error::Invalid(format!("{}: demo has no rows", path.display())));
    }
    Ok(DemoLog {
        driver_id: meta("driver").unwrap_or_else(|| "unknown".into()),
        track_id,
        seed: meta("seed").and_then(|s| s.parse().ok()).unwrap_or(0),
        rounds,
    })
}
