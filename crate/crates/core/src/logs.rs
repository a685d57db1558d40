//! Time-stamped trajectory records and the episode CSV format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::io::{fmt_f64, write_atomic};
use crate::sim::{SimState, TerminationKind, MAX_STEER};

pub const EPISODE_COLUMNS: [&str; 10] = [
    "t",
    "sigma",
    "x",
    "y",
    "theta",
    "V_kmh",
    "D",
    "psi_deg",
    "tau",
    "termination",
];

/// One 10 Hz sample of a driven trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub t: f64,
    pub sigma: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v_kmh: f64,
    pub d: f64,
    pub psi_deg: f64,
    pub tau: f64,
    pub termination: TerminationKind,
}

impl Record {
    pub fn from_state(state: &SimState, t: f64, termination: TerminationKind) -> Self {
        Record {
            t,
            sigma: state.arc_length,
            x: state.position.x,
            y: state.position.y,
            theta: state.heading,
            v_kmh: state.speed_kmh(),
            d: state.lateral,
            psi_deg: state.steering.to_degrees(),
            tau: state.torque,
            termination,
        }
    }

    /// Normalized steering in `[-1, 1]`.
    pub fn steering_scaled(&self) -> f64 {
        self.psi_deg.to_radians() / MAX_STEER
    }

    pub(crate) fn write_fields(&self, out: &mut String) {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            fmt_f64(self.t),
            fmt_f64(self.sigma),
            fmt_f64(self.x),
            fmt_f64(self.y),
            fmt_f64(self.theta),
            fmt_f64(self.v_kmh),
            fmt_f64(self.d),
            fmt_f64(self.psi_deg),
            fmt_f64(self.tau),
            self.termination
        );
    }
}

/// A single rollout episode, possibly spanning several laps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeLog {
    pub records: Vec<Record>,
}

impl EpisodeLog {
    pub fn termination(&self) -> TerminationKind {
        self.records
            .last()
            .map(|r| r.termination)
            .unwrap_or(TerminationKind::None)
    }

    pub fn to_csv(&self) -> String {
        let mut out = EPISODE_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            r.write_fields(&mut out);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}
