//! Browser demo: drive the simulator by keyboard, and overlay the scripted
//! expert's fitted track-position band. The drive loop speaks the same
//! newline-delimited session messages as `drive-imitation serve`, only
//! in-process instead of over TCP.

use std::sync::Arc;

use drive_imitation::expert::{collect_demos, Variable};
use drive_imitation::gp::{fit_demo, sample_grid};
use drive_imitation::session::{Session, SessionMessage};
use drive_imitation::track::{track_by_id, Track};
use wasm_bindgen::prelude::*;

fn load(track_id: &str) -> Result<Track, JsError> {
    track_by_id(track_id).map_err(|e| JsError::new(&e.to_string()))
}

fn flat(points: impl Iterator<Item = (f64, f64)>) -> Vec<f64> {
    points.flat_map(|(x, y)| [x, y]).collect()
}

/// One local driving session on a named track.
#[wasm_bindgen]
pub struct Drive {
    session: Session,
    track: Arc<Track>,
}

#[wasm_bindgen]
impl Drive {
    #[wasm_bindgen(constructor)]
    pub fn new(track_id: &str) -> Result<Drive, JsError> {
        let track = Arc::new(load(track_id)?);
        Ok(Drive {
            session: Session::new(Arc::clone(&track), "web", ""),
            track,
        })
    }

    /// Handles one protocol line and returns the reply lines.
    pub fn send(&mut self, line: &str) -> String {
        self.session.handle_line(line).iter().map(SessionMessage::to_line).collect()
    }

    #[wasm_bindgen(getter)]
    pub fn track_id(&self) -> String {
        self.track.id.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn lap_length(&self) -> f64 {
        self.track.total_length
    }

    /// Left road edge as `[x0, y0, x1, y1, ...]`.
    pub fn left_edge(&self) -> Vec<f64> {
        flat(self.track.left_boundary().iter().map(|p| (p.x, p.y)))
    }

    pub fn right_edge(&self) -> Vec<f64> {
        flat(self.track.right_boundary().iter().map(|p| (p.x, p.y)))
    }

    /// Four corners per obstacle, flattened.
    pub fn obstacles(&self) -> Vec<f64> {
        flat(
            self.track
                .obstacle_boxes()
                .iter()
                .flat_map(|b| b.corners())
                .map(|p| (p.x, p.y)),
        )
    }

    /// World position of arc length `s` at lateral offset `d` (positive right).
    pub fn point_at(&self, s: f64, d: f64) -> Vec<f64> {
        let p = self.track.point_at(s, d);
        vec![p.x, p.y]
    }
}

/// Drives the scripted expert for `rounds` laps and fits its track-position
/// GP. Returns `[grid | mean | lower | upper]`, each on the 5 m lap grid.
#[wasm_bindgen]
pub fn expert_band(track_id: &str, rounds: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let track = load(track_id)?;
    let err = |e: drive_imitation::Error| JsError::new(&e.to_string());
    let demo = collect_demos(&track, rounds, seed).map_err(err)?;
    let model = fit_demo(&demo, Variable::Trackpos, track.total_length).map_err(err)?;
    let grid = sample_grid(track.total_length);
    let band = model.band(&grid);
    let mut out = grid;
    out.extend(&band.mean);
    out.extend(&band.lower);
    out.extend(&band.upper);
    Ok(out)
}
