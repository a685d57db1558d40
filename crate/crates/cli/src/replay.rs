use std::fmt::Write as _;
use std::path::Path;

use drive_imitation::expert::{parse_demo, DemoLog};
use drive_imitation::io::write_atomic;
use drive_imitation::track::Track;
use drive_imitation::{Error, Result};

use crate::commands::{resolve_track, track_from_log};

/// Reads a demo CSV, or an episode CSV (no `round` column) as a single round.
pub fn load_log(path: &Path, track: &Track) -> Result<DemoLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap_or_default();
    if header.split(',').any(|c| c.trim() == "round") {
        return parse_demo(path, &text, track);
    }
    let mut patched = String::with_capacity(text.len() + text.lines().count() * 2);
    let mut seen_header = false;
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            patched.push_str(line);
        } else if !seen_header {
            seen_header = true;
            let _ = write!(patched, "round,{line}");
        } else {
            let _ = write!(patched, "0,{line}");
        }
        patched.push('\n');
    }
    parse_demo(path, &patched, track)
}

fn mean_sd(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count().max(1) as f64;
    let m = v.clone().sum::<f64>() / n;
    (m, (v.map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn summary(log: &DemoLog) -> String {
    let mut s = format!("driver {} on {}\nround,rows,t_start,t_end,mean_V_kmh,mean_D,sd_D,end\n", log.driver_id, log.track_id);
    for (i, r) in log.rounds.iter().enumerate() {
        let (Some(first), Some(last)) = (r.first(), r.last()) else {
            continue;
        };
        let (mv, _) = mean_sd(r.iter().map(|x| x.v_kmh));
        let (md, sd) = mean_sd(r.iter().map(|x| x.d));
        let _ = writeln!(
            s,
            "{i},{},{:.1},{:.1},{mv:.2},{md:.3},{sd:.3},{}",
            r.len(),
            first.t,
            last.t,
            last.termination
        );
    }
    s
}

/// Top-down SVG: road edges, obstacles, and one path per round.
pub fn svg(track: &Track, log: &DemoLog) -> String {
    let pts = track.left_boundary().iter().chain(track.right_boundary());
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in pts {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let pad = 10.0;
    let (w, h) = (x1 - x0 + 2.0 * pad, y1 - y0 + 2.0 * pad);
    // y grows downward in SVG
    let tx = |x: f64| x - x0 + pad;
    let ty = |y: f64| y1 - y + pad;
    let poly = |it: &mut dyn Iterator<Item = (f64, f64)>| {
        it.map(|(x, y)| format!("{:.2},{:.2}", tx(x), ty(y))).collect::<Vec<_>>().join(" ")
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w:.1} {h:.1}\" width=\"{:.0}\" height=\"{:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"#f4f4f0\"/>\n",
        w.min(1200.0),
        h * w.min(1200.0) / w
    );
    for edge in [track.left_boundary(), track.right_boundary()] {
        let _ = writeln!(
            s,
            "<polygon points=\"{}\" fill=\"none\" stroke=\"#333\" stroke-width=\"0.6\"/>",
            poly(&mut edge.iter().map(|p| (p.x, p.y)))
        );
    }
    for b in track.obstacle_boxes() {
        let c = b.corners();
        let _ = writeln!(s, "<polygon points=\"{}\" fill=\"#c0392b\"/>", poly(&mut c.iter().map(|p| (p.x, p.y))));
    }
    let colors = ["#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2", "#7f7f7f"];
    for (i, r) in log.rounds.iter().enumerate() {
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"0.5\" opacity=\"0.8\"/>",
            poly(&mut r.iter().map(|p| (p.x, p.y))),
            colors[i % colors.len()]
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn run(log: &Path, track: Option<&str>, out: Option<&Path>) -> Result<()> {
    let track = match track {
        Some(t) => resolve_track(t)?,
        None => track_from_log(log)?,
    };
    let demo = load_log(log, &track)?;
    print!("{}", summary(&demo));
    if let Some(out) = out {
        write_atomic(out, svg(&track, &demo).as_bytes())?;
        println!("-> {}", out.display());
    }
    Ok(())
}
