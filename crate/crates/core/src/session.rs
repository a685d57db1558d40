//! Lockstep live-driving sessions: the message protocol plus the per-client
//! simulator and demo recorder. Transport lives in the CLI.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::DemoLog;
use crate::logs::Record;
use crate::sim::{self, Action, Simulator, TerminationKind, VehicleParams, DT, KMH, NUM_RAYS};
use crate::track::{Lane, Track};

/// Every `PREVIEW_STRIDE`-th ray goes into `ranges_preview`.
pub const PREVIEW_STRIDE: usize = 8;
/// Speed at session start and after each termination.
pub const START_SPEED_KMH: f64 = 30.0;
/// Recording pauses after this long without a client message.
pub const SILENCE_LIMIT: std::time::Duration = std::time::Duration::from_secs(10);

/// One newline-delimited JSON message. `type` carries the variant name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionMessage {
    Hello {
        track_id: String,
        dt: f64,
    },
    Control {
        steering: f64,
        torque: f64,
        seq: u64,
    },
    State {
        seq: u64,
        x: f64,
        y: f64,
        theta: f64,
        #[serde(rename = "V_kmh")]
        v_kmh: f64,
        #[serde(rename = "D")]
        d: f64,
        sigma: f64,
        /// Ray distances in meters, every eighth ray; all -1 off road.
        ranges_preview: Vec<f64>,
        termination: TerminationKind,
    },
    Reset {},
    Record {
        on: bool,
    },
    DemoSaved {
        path: String,
    },
    Error {
        message: String,
    },
}

impl SessionMessage {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("messages serialize");
        s.push('\n');
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim()).map_err(|e| Error::Invalid(format!("malformed message: {e}")))
    }

    fn error(msg: impl Into<String>) -> Self {
        SessionMessage::Error { message: msg.into() }
    }
}

#[derive(Debug, Clone, Default)]
struct Recorder {
    rounds: Vec<Vec<Record>>,
    /// Round index of the current episode's first lap.
    base_round: usize,
    /// Progress at which recording (or the current episode) started.
    start_progress: f64,
    steps: u64,
    paused: bool,
}

impl Recorder {
    fn push(&mut self, state: &sim::SimState, termination: TerminationKind, lap: f64) {
        let round = self.base_round + ((state.progress - self.start_progress).max(0.0) / lap).floor() as usize;
        if self.rounds.len() <= round {
            self.rounds.resize(round + 1, Vec::new());
        }
        let t = self.steps as f64 * DT;
        self.rounds[round].push(Record::from_state(state, t, termination));
        self.steps += 1;
    }

    /// A reset starts a fresh round so laps never straddle two episodes.
    fn restart(&mut self) {
        self.base_round = self.rounds.len();
        self.start_progress = 0.0;
    }
}

/// One client's simulator, sequence check and recorder.
pub struct Session {
    sim: Simulator,
    id: String,
    out_dir: PathBuf,
    last_seq: Option<u64>,
    recorder: Option<Recorder>,
    saved: usize,
}

impl Session {
    pub fn new(track: Arc<Track>, id: impl Into<String>, out_dir: impl Into<PathBuf>) -> Self {
        let state = Self::start_state(&track);
        Session {
            sim: Simulator::new(track, VehicleParams::default(), state),
            id: id.into(),
            out_dir: out_dir.into(),
            last_seq: None,
            recorder: None,
            saved: 0,
        }
    }

    fn start_state(track: &Track) -> sim::SimState {
        sim::place(track, 0.0, Lane::Right.center_offset(track.lane_width), START_SPEED_KMH * KMH)
    }

    pub fn track(&self) -> &Track {
        &self.sim.track
    }

    pub fn is_recording(&self) -> bool {
        self.recorder.as_ref().is_some_and(|r| !r.paused)
    }

    fn state_message(&self, seq: u64, termination: TerminationKind) -> SessionMessage {
        let s = &self.sim.state;
        let ranges_preview = if self.sim.off_road() {
            vec![-1.0; NUM_RAYS / PREVIEW_STRIDE]
        } else {
            sim::sense_rays(s, &self.sim.track).into_iter().step_by(PREVIEW_STRIDE).collect()
        };
        SessionMessage::State {
            seq,
            x: s.position.x,
            y: s.position.y,
            theta: s.heading,
            v_kmh: s.speed_kmh(),
            d: s.lateral,
            sigma: s.arc_length,
            ranges_preview,
            termination,
        }
    }

    fn restart(&mut self) {
        let state = Self::start_state(&self.sim.track);
        self.sim.set_state(state);
        if let Some(r) = self.recorder.as_mut() {
            r.restart();
        }
    }

    /// Parses and handles one line. Malformed input yields an error reply.
    pub fn handle_line(&mut self, line: &str) -> Vec<SessionMessage> {
        match SessionMessage::parse(line) {
            Ok(msg) => self.handle(msg),
            Err(e) => vec![SessionMessage::error(e.to_string())],
        }
    }

    pub fn handle(&mut self, msg: SessionMessage) -> Vec<SessionMessage> {
        match msg {
            SessionMessage::Hello { track_id, dt } => {
                if track_id != self.sim.track.id {
                    return vec![SessionMessage::error(format!(
                        "this server drives track `{}`, not `{track_id}`",
                        self.sim.track.id
                    ))];
                }
                if (dt - DT).abs() > 1e-12 {
                    return vec![SessionMessage::error(format!("step must be {DT} s, got {dt}"))];
                }
                vec![
                    SessionMessage::Hello {
                        track_id: self.sim.track.id.clone(),
                        dt: DT,
                    },
                    self.state_message(0, TerminationKind::None),
                ]
            }
            SessionMessage::Control { steering, torque, seq } => self.control(steering, torque, seq),
            SessionMessage::Reset {} => {
                self.restart();
                vec![self.state_message(self.last_seq.unwrap_or(0), TerminationKind::None)]
            }
            SessionMessage::Record { on: true } => {
                let progress = self.sim.state.progress;
                let r = self.recorder.get_or_insert_with(|| Recorder {
                    start_progress: progress,
                    ..Recorder::default()
                });
                r.paused = false;
                vec![SessionMessage::Record { on: true }]
            }
            SessionMessage::Record { on: false } => match self.finish_recording() {
                Ok(path) => vec![SessionMessage::DemoSaved {
                    path: path.display().to_string(),
                }],
                Err(e) => vec![SessionMessage::error(e.to_string())],
            },
            other => vec![SessionMessage::error(format!(
                "unexpected client message `{}`",
                serde_json::to_value(&other).ok().and_then(|v| v["type"].as_str().map(String::from)).unwrap_or_default()
            ))],
        }
    }

    fn control(&mut self, steering: f64, torque: f64, seq: u64) -> Vec<SessionMessage> {
        if let Some(last) = self.last_seq {
            if seq <= last {
                return vec![SessionMessage::error(format!("seq {seq} is not above {last}"))];
            }
        }
        if !(steering.is_finite() && torque.is_finite() && steering.abs() <= 1.0 && torque.abs() <= 1.0) {
            return vec![SessionMessage::error(format!(
                "control values must lie in [-1, 1], got steering {steering}, torque {torque}"
            ))];
        }
        let kind = match self.sim.step(Action::new(steering, torque)) {
            Ok((_, kind)) => kind,
            Err(e) => return vec![SessionMessage::error(e.to_string())],
        };
        self.last_seq = Some(seq);
        let lap = self.sim.track.total_length;
        if let Some(r) = self.recorder.as_mut().filter(|r| !r.paused) {
            r.push(&self.sim.state, kind, lap);
        }
        let reply = self.state_message(seq, kind);
        if kind.is_terminal() {
            self.restart();
        }
        vec![reply]
    }

    /// Called by the transport when the client has been silent past
    /// [`SILENCE_LIMIT`]. Pauses an active recording.
    pub fn on_silence(&mut self) -> Option<SessionMessage> {
        let r = self.recorder.as_mut().filter(|r| !r.paused)?;
        r.paused = true;
        Some(SessionMessage::error("recording paused after client silence; send record on to resume"))
    }

    fn finish_recording(&mut self) -> Result<PathBuf> {
        let r = self
            .recorder
            .take()
            .ok_or_else(|| Error::Invalid("not recording".into()))?;
        let rounds: Vec<Vec<Record>> = r.rounds.into_iter().filter(|x| !x.is_empty()).collect();
        if rounds.is_empty() {
            return Err(Error::Invalid("recording holds no rows".into()));
        }
        let demo = DemoLog {
            driver_id: format!("human-{}", self.id),
            track_id: self.sim.track.id.clone(),
            seed: 0,
            rounds,
        };
        self.saved += 1;
        let path = self.out_dir.join(format!("demo-{}-{}.csv", self.id, self.saved));
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        demo.save(&path)?;
        Ok(path)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }
}
