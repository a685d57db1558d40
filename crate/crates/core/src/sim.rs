//! Vehicle dynamics, range sensor, observation assembly and termination.
//!
//! Units are SI internally; km/h and degrees appear only in observation
//! scaling, logs and rewards.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, OrientedBox, Vec2};
use crate::track::{forward_gap, Lane, Track};

pub const DT: f64 = 0.1;
pub const KMH: f64 = 1.0 / 3.6;
pub const MAX_SPEED: f64 = 100.0 * KMH;
pub const MAX_STEER: f64 = 25.0 * PI / 180.0;
pub const SENSOR_RANGE: f64 = 300.0;
pub const NUM_RAYS: usize = 288;
pub const NUM_SCALARS: usize = 11;
pub const OBS_DIM: usize = 2 * NUM_SCALARS + NUM_RAYS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub steer_time_constant: f64,
    pub accel_max: f64,
    pub brake_max: f64,
    pub car_length: f64,
    pub car_width: f64,
    pub substeps: usize,
    pub too_slow_kmh: f64,
    pub too_slow_grace: f64,
    pub wrong_way_window: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            wheelbase: 2.6,
            steer_time_constant: 0.2,
            accel_max: 4.0,
            brake_max: 8.0,
            car_length: 4.5,
            car_width: 1.8,
            substeps: 5,
            too_slow_kmh: 5.0,
            too_slow_grace: 3.0,
            wrong_way_window: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    /// Physical front-wheel angle (rad).
    pub steering: f64,
    pub torque: f64,
    pub arc_length: f64,
    pub lateral: f64,
    pub tangent_heading: f64,
    /// Unwrapped arc-length progress since reset.
    pub progress: f64,
    pub odometer: f64,
    pub lap_count: u32,
    pub time_step: u64,
    pub wrong_way_time: f64,
}

impl SimState {
    pub fn speed_kmh(&self) -> f64 {
        self.speed / KMH
    }

    pub fn footprint(&self, params: &VehicleParams) -> OrientedBox {
        OrientedBox::new(
            self.position,
            self.heading,
            params.car_length / 2.0,
            params.car_width / 2.0,
        )
    }

    pub fn elapsed(&self) -> f64 {
        self.time_step as f64 * DT
    }
}

/// Normalized controls in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub steering: f64,
    pub torque: f64,
}

impl Action {
    pub fn new(steering: f64, torque: f64) -> Self {
        Action { steering, torque }
    }

    pub fn clamped(self) -> Action {
        Action {
            steering: self.steering.clamp(-1.0, 1.0),
            torque: self.torque.clamp(-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationKind {
    ObstacleCollision,
    OffRoad,
    TooSlow,
    WrongWay,
    None,
}

impl TerminationKind {
    pub fn is_terminal(self) -> bool {
        self != TerminationKind::None
    }

    pub const ALL: [TerminationKind; 5] = [
        TerminationKind::ObstacleCollision,
        TerminationKind::OffRoad,
        TerminationKind::TooSlow,
        TerminationKind::WrongWay,
        TerminationKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TerminationKind::ObstacleCollision => "obstacle_collision",
            TerminationKind::OffRoad => "off_road",
            TerminationKind::TooSlow => "too_slow",
            TerminationKind::WrongWay => "wrong_way",
            TerminationKind::None => "none",
        }
    }
}

impl fmt::Display for TerminationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TerminationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TerminationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown termination `{s}`")))
    }
}

/// Places the car at arc length `s` with lateral offset `lateral`, aligned with the road.
pub fn place(track: &Track, s: f64, lateral: f64, speed: f64) -> SimState {
    let (_, heading) = track.centerline_point(s);
    SimState {
        position: track.point_at(s, lateral),
        heading,
        speed,
        steering: 0.0,
        torque: 0.0,
        arc_length: track.wrap(s),
        lateral,
        tangent_heading: heading,
        progress: 0.0,
        odometer: 0.0,
        lap_count: 0,
        time_step: 0,
        wrong_way_time: 0.0,
    }
}

/// Spawn positions this far before a same-lane obstacle are redrawn.
const SPAWN_CLEARANCE_AHEAD: f64 = 50.0;
const SPAWN_CLEARANCE_BEHIND: f64 = 5.0;

/// Reference-state initialization: random arc length on the right-lane
/// center, speed uniform in 30..90 km/h.
pub fn reset<R: Rng + ?Sized>(track: &Track, rng: &mut R) -> SimState {
    let lateral = Lane::Right.center_offset(track.lane_width);
    let s = loop {
        let s = rng.random_range(0.0..track.total_length);
        let blocked = track.obstacles.iter().any(|o| {
            o.lane == Lane::Right
                && (forward_gap(s, o.arc_length, track.total_length) < SPAWN_CLEARANCE_AHEAD
                    || forward_gap(o.arc_length, s, track.total_length) < SPAWN_CLEARANCE_BEHIND)
        });
        if !blocked {
            break s;
        }
    };
    let speed = rng.random_range(30.0..90.0) * KMH;
    place(track, s, lateral, speed)
}

/// Advances one control interval with a kinematic bicycle model.
pub fn step(
    track: &Track,
    params: &VehicleParams,
    state: &SimState,
    action: Action,
    dt: f64,
) -> Result<(SimState, TerminationKind)> {
    if !action.steering.is_finite() || !action.torque.is_finite() {
        return Err(Error::NonFinite(format!("action {action:?}")));
    }
    let action = action.clamped();
    let steer_cmd = action.steering * MAX_STEER;
    let h = dt / params.substeps as f64;
    let lag = 1.0 - (-h / params.steer_time_constant).exp();
    let accel = if action.torque >= 0.0 {
        params.accel_max * action.torque
    } else {
        params.brake_max * action.torque
    };

    let mut s = *state;
    s.torque = action.torque;
    for _ in 0..params.substeps {
        s.steering += (steer_cmd - s.steering) * lag;
        let v0 = s.speed;
        let v1 = (v0 + accel * h).clamp(0.0, MAX_SPEED);
        let v = 0.5 * (v0 + v1);
        let omega = v / params.wheelbase * s.steering.tan();
        let dth = omega * h;
        let d = if dth.abs() < 1e-12 {
            Vec2::from_angle(s.heading) * (v * h)
        } else {
            let r = v / omega;
            Vec2::new(
                r * ((s.heading + dth).sin() - s.heading.sin()),
                r * (s.heading.cos() - (s.heading + dth).cos()),
            )
        };
        s.position = s.position + d;
        s.odometer += d.norm();
        s.heading = wrap_angle(s.heading + dth);
        s.speed = v1;
    }
    s.time_step += 1;

    let proj = match track.project(s.position) {
        Ok(p) => p,
        Err(Error::OutOfDomain { .. }) => {
            s.lateral = track.road_half_width() + 1.0;
            return Ok((s, TerminationKind::OffRoad));
        }
        Err(e) => return Err(e),
    };
    let mut ds = proj.arc_length - state.arc_length;
    let half = track.total_length / 2.0;
    if ds >= half {
        ds -= track.total_length;
    } else if ds < -half {
        ds += track.total_length;
    }
    s.progress += ds;
    s.lap_count = (s.progress / track.total_length).floor().max(0.0) as u32;
    s.arc_length = proj.arc_length;
    s.lateral = proj.lateral;
    s.tangent_heading = proj.tangent_heading;

    let along = s.speed * (s.heading - proj.tangent_heading).cos();
    if along < 0.0 {
        s.wrong_way_time += dt;
    } else {
        s.wrong_way_time = 0.0;
    }

    let kind = termination(track, params, &s);
    Ok((s, kind))
}

/// Termination test, in priority order: collision, off road, wrong way, too slow.
pub fn termination(track: &Track, params: &VehicleParams, s: &SimState) -> TerminationKind {
    let car = s.footprint(params);
    if track.obstacle_boxes().iter().any(|b| b.overlaps(&car)) {
        return TerminationKind::ObstacleCollision;
    }
    if s.lateral.abs() > track.road_half_width() {
        return TerminationKind::OffRoad;
    }
    if s.wrong_way_time >= params.wrong_way_window - 1e-9 {
        return TerminationKind::WrongWay;
    }
    if s.elapsed() >= params.too_slow_grace - 1e-9 && s.speed_kmh() < params.too_slow_kmh {
        return TerminationKind::TooSlow;
    }
    TerminationKind::None
}

/// 288 range readings (m) over 360 degrees, ray `i` at heading + i * 1.25 deg.
pub fn sense_rays(state: &SimState, track: &Track) -> Vec<f64> {
    let step = 2.0 * PI / NUM_RAYS as f64;
    (0..NUM_RAYS)
        .map(|i| {
            let dir = Vec2::from_angle(state.heading + i as f64 * step);
            track.cast_ray(state.position, dir, SENSOR_RANGE)
        })
        .collect()
}

/// Arc-length gaps `(front_right, front_left, back_right, back_left)`, capped at 300 m.
pub fn nearest_obstacles(state: &SimState, track: &Track) -> [f64; 4] {
    let mut out = [SENSOR_RANGE; 4];
    for o in &track.obstacles {
        let ahead = forward_gap(state.arc_length, o.arc_length, track.total_length);
        let behind = forward_gap(o.arc_length, state.arc_length, track.total_length);
        let (fi, bi) = match o.lane {
            Lane::Right => (0, 2),
            Lane::Left => (1, 3),
        };
        out[fi] = out[fi].min(ahead);
        out[bi] = out[bi].min(behind);
    }
    out
}

/// Affine map from `range` to `target`, clamping the input to `range` first.
pub fn scale(value: f64, range: (f64, f64), target: (f64, f64)) -> Result<f64> {
    let (lo, hi) = range;
    if !(hi > lo) {
        return Err(Error::Invalid(format!("degenerate range [{lo}, {hi}]")));
    }
    let v = value.clamp(lo, hi);
    Ok(target.0 + (v - lo) / (hi - lo) * (target.1 - target.0))
}

/// Inverse of [`scale`] on the unclamped interior.
pub fn unscale(value: f64, range: (f64, f64), target: (f64, f64)) -> f64 {
    range.0 + (value - target.0) / (target.1 - target.0) * (range.1 - range.0)
}

/// Physical ranges and scaled targets of the 11 scalar observation entries.
pub const SCALAR_SCALES: [((f64, f64), (f64, f64)); NUM_SCALARS] = [
    ((-MAX_STEER, MAX_STEER), (-1.0, 1.0)),
    ((-1.0, 1.0), (-1.0, 1.0)),
    ((0.0, 100.0), (0.0, 1.0)),
    ((-PI, PI), (-1.0, 1.0)),
    ((-6.0, 6.0), (-1.0, 1.0)),
    ((-9.0, 3.0), (-1.0, 1.0 / 3.0)),
    ((-3.0, 9.0), (-1.0 / 3.0, 1.0)),
    ((0.0, SENSOR_RANGE), (0.0, 1.0)),
    ((0.0, SENSOR_RANGE), (0.0, 1.0)),
    ((0.0, SENSOR_RANGE), (0.0, 1.0)),
    ((0.0, SENSOR_RANGE), (0.0, 1.0)),
];
pub const RAY_SCALE: ((f64, f64), (f64, f64)) = ((0.0, SENSOR_RANGE), (0.0, 1.0));

/// Physical scalar observation: steering (rad), torque, speed (km/h), heading
/// relative to the road tangent (rad), D, D - 3, D + 3, and the four obstacle gaps.
pub fn scalars(state: &SimState, track: &Track) -> [f64; NUM_SCALARS] {
    let gaps = nearest_obstacles(state, track);
    let half_lane = track.lane_width / 2.0;
    [
        state.steering,
        state.torque,
        state.speed_kmh(),
        wrap_angle(state.heading - state.tangent_heading),
        state.lateral,
        state.lateral - half_lane,
        state.lateral + half_lane,
        gaps[0],
        gaps[1],
        gaps[2],
        gaps[3],
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub vector: Vec<f64>,
}

impl Observation {
    pub fn current(&self) -> &[f64] {
        &self.vector[..NUM_SCALARS]
    }

    pub fn previous(&self) -> &[f64] {
        &self.vector[NUM_SCALARS..2 * NUM_SCALARS]
    }

    pub fn ranges(&self) -> &[f64] {
        &self.vector[2 * NUM_SCALARS..]
    }
}

/// `[scaled current 11 | scaled previous 11 | scaled ranges 288]`; range
/// entries are all -1 when off road.
pub fn assemble_observation(
    current: &[f64],
    previous: &[f64],
    ranges: &[f64],
    off_road: bool,
) -> Result<Observation> {
    for (what, v, n) in [
        ("current scalars", current, NUM_SCALARS),
        ("previous scalars", previous, NUM_SCALARS),
        ("ranges", ranges, NUM_RAYS),
    ] {
        if v.len() != n {
            return Err(Error::Dimension {
                what,
                expected: n,
                got: v.len(),
            });
        }
    }
    let mut vector = Vec::with_capacity(OBS_DIM);
    for half in [current, previous] {
        for (v, (range, target)) in half.iter().zip(SCALAR_SCALES) {
            vector.push(scale(*v, range, target)?);
        }
    }
    if off_road {
        vector.extend(std::iter::repeat_n(-1.0, NUM_RAYS));
    } else {
        let (range, target) = RAY_SCALE;
        for r in ranges {
            vector.push(scale(*r, range, target)?);
        }
    }
    Ok(Observation { vector })
}

/// Stateful simulator: current state plus the previous scalar frame for stacking.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub track: Arc<Track>,
    pub params: VehicleParams,
    pub state: SimState,
    previous: [f64; NUM_SCALARS],
}

impl Simulator {
    pub fn new(track: Arc<Track>, params: VehicleParams, state: SimState) -> Self {
        let previous = scalars(&state, &track);
        Simulator {
            track,
            params,
            state,
            previous,
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Observation {
        let state = reset(&self.track, rng);
        self.set_state(state)
    }

    /// Replaces the state and seeds the stacked frame with a duplicate of it.
    pub fn set_state(&mut self, state: SimState) -> Observation {
        self.state = state;
        self.previous = scalars(&self.state, &self.track);
        self.observation_with(&self.previous.clone())
    }

    pub fn off_road(&self) -> bool {
        self.state.lateral.abs() > self.track.road_half_width()
    }

    fn observation_with(&self, previous: &[f64; NUM_SCALARS]) -> Observation {
        let current = scalars(&self.state, &self.track);
        let rays = if self.off_road() {
            vec![SENSOR_RANGE; NUM_RAYS]
        } else {
            sense_rays(&self.state, &self.track)
        };
        assemble_observation(&current, previous, &rays, self.off_road())
            .expect("fixed dimensions")
    }

    pub fn step(&mut self, action: Action) -> Result<(Observation, TerminationKind)> {
        let (next, kind) = step(&self.track, &self.params, &self.state, action, DT)?;
        let previous = scalars(&self.state, &self.track);
        self.state = next;
        let obs = self.observation_with(&previous);
        self.previous = previous;
        Ok((obs, kind))
    }
}
