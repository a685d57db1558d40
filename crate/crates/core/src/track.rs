//! Road geometry: a closed centerline polyline parameterized by arc length,
//! two lanes, and static obstacles.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{ray_segment, wrap_angle, OrientedBox, Vec2};

pub const LANE_WIDTH: f64 = 6.0;
/// Obstacles are a barricade 2.5 m across the lane and 1.0 m deep.
pub const OBSTACLE_HALF_EXTENT: [f64; 2] = [0.5, 1.25];
/// Projection is only defined this close to the centerline.
pub const PROJECTION_LIMIT: f64 = 50.0;
/// Length used for generalization roads when none is given.
pub const GENERALIZATION_LENGTH: f64 = 3140.0;

const MAX_STRAIGHT_PIECE: f64 = 2.0;
const MAX_ARC_PIECE: f64 = 1.0;
const RAY_CELL: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lane {
    Left,
    Right,
}

impl Lane {
    /// Signed lateral offset of the lane center (positive is right).
    pub fn center_offset(self, lane_width: f64) -> f64 {
        match self {
            Lane::Right => lane_width / 2.0,
            Lane::Left => -lane_width / 2.0,
        }
    }

    pub fn other(self) -> Lane {
        match self {
            Lane::Left => Lane::Right,
            Lane::Right => Lane::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub arc_length: f64,
    pub lane: Lane,
    /// Half extents along and across the road.
    pub half_extent: [f64; 2],
}

impl Obstacle {
    pub fn new(arc_length: f64, lane: Lane) -> Self {
        Obstacle {
            arc_length,
            lane,
            half_extent: OBSTACLE_HALF_EXTENT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadKind {
    Training,
    Alternating50m,
    GaussianSpaced,
    GaussianBatched,
}

impl fmt::Display for RoadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoadKind::Training => "training",
            RoadKind::Alternating50m => "alternating_50m",
            RoadKind::GaussianSpaced => "gaussian_spaced",
            RoadKind::GaussianBatched => "gaussian_batched",
        })
    }
}

impl FromStr for RoadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" => Ok(RoadKind::Training),
            "alternating_50m" => Ok(RoadKind::Alternating50m),
            "gaussian_spaced" => Ok(RoadKind::GaussianSpaced),
            "gaussian_batched" => Ok(RoadKind::GaussianBatched),
            other => Err(Error::Invalid(format!("unknown road kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSpec {
    pub kind: RoadKind,
    pub length: f64,
    pub seed: u64,
    pub spacing_mean: f64,
    pub spacing_std: f64,
    pub batch_range: (u32, u32),
}

impl RoadSpec {
    pub fn new(kind: RoadKind, seed: u64) -> Self {
        RoadSpec {
            kind,
            length: GENERALIZATION_LENGTH,
            seed,
            spacing_mean: 100.0,
            spacing_std: 10.0,
            batch_range: (2, 4),
        }
    }

    pub fn with_length(mut self, length: f64) -> Self {
        self.length = length;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.spacing_std > 0.0) {
            return Err(Error::Invalid(format!(
                "spacing_std must be > 0, got {}",
                self.spacing_std
            )));
        }
        if !(self.spacing_mean > 0.0) {
            return Err(Error::Invalid(format!(
                "spacing_mean must be > 0, got {}",
                self.spacing_mean
            )));
        }
        if !(self.length >= 200.0) {
            return Err(Error::Invalid(format!(
                "road length must be >= 200 m, got {}",
                self.length
            )));
        }
        let (lo, hi) = self.batch_range;
        if self.kind == RoadKind::GaussianBatched && (lo < 2 || hi > 4 || lo > hi) {
            return Err(Error::Invalid(format!(
                "batch_range must lie within [2, 4], got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Nearest point on the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub arc_length: f64,
    /// Signed offset, positive toward the right boundary.
    pub lateral: f64,
    pub tangent_heading: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrackFile {
    id: String,
    lane_width: f64,
    centerline: Vec<[f64; 2]>,
    obstacles: Vec<Obstacle>,
}

/// Immutable road description. Derived lookup tables are rebuilt on load.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: String,
    pub centerline: Vec<Vec2>,
    pub segment_lengths: Vec<f64>,
    pub total_length: f64,
    pub lane_width: f64,
    pub obstacles: Vec<Obstacle>,
    cumulative: Vec<f64>,
    vertex_tangents: Vec<Vec2>,
    left_boundary: Vec<Vec2>,
    right_boundary: Vec<Vec2>,
    obstacle_boxes: Vec<OrientedBox>,
    rays: RayIndex,
}

impl Track {
    pub fn new(
        id: impl Into<String>,
        centerline: Vec<Vec2>,
        lane_width: f64,
        mut obstacles: Vec<Obstacle>,
    ) -> Result<Self> {
        if centerline.len() < 3 {
            return Err(Error::Invalid("centerline needs at least 3 points".into()));
        }
        if centerline.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("centerline".into()));
        }
        if !(lane_width > 0.0) {
            return Err(Error::Invalid("lane_width must be positive".into()));
        }
        let n = centerline.len();
        let segment_lengths: Vec<f64> = (0..n)
            .map(|i| centerline[i].distance(centerline[(i + 1) % n]))
            .collect();
        if segment_lengths.iter().any(|&l| !(l > 1e-9)) {
            return Err(Error::Invalid("centerline has repeated points".into()));
        }
        let mut cumulative = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for l in &segment_lengths {
            acc += l;
            cumulative.push(acc);
        }
        let total_length = acc;

        let seg_dir = |i: usize| (centerline[(i + 1) % n] - centerline[i]).normalized();
        let vertex_tangents: Vec<Vec2> = (0..n)
            .map(|i| (seg_dir((i + n - 1) % n) + seg_dir(i)).normalized())
            .collect();
        let half = lane_width;
        let right_boundary: Vec<Vec2> = (0..n)
            .map(|i| centerline[i] - vertex_tangents[i].perp() * half)
            .collect();
        let left_boundary: Vec<Vec2> = (0..n)
            .map(|i| centerline[i] + vertex_tangents[i].perp() * half)
            .collect();

        for o in &obstacles {
            if !(0.0..total_length).contains(&o.arc_length) {
                return Err(Error::Invalid(format!(
                    "obstacle arc_length {} outside [0, {total_length})",
                    o.arc_length
                )));
            }
            let offset = o.lane.center_offset(lane_width).abs();
            if o.half_extent[1] > offset || offset + o.half_extent[1] > lane_width {
                return Err(Error::Invalid(format!(
                    "obstacle at {} does not fit in its lane",
                    o.arc_length
                )));
            }
        }
        obstacles.sort_by(|a, b| a.arc_length.total_cmp(&b.arc_length));

        let mut track = Track {
            id: id.into(),
            centerline,
            segment_lengths,
            total_length,
            lane_width,
            obstacles,
            cumulative,
            vertex_tangents,
            left_boundary,
            right_boundary,
            obstacle_boxes: Vec::new(),
            rays: RayIndex::default(),
        };
        track.obstacle_boxes = track
            .obstacles
            .iter()
            .map(|o| {
                let (c, h) = track.centerline_point(o.arc_length);
                let center = c + right_normal(h) * o.lane.center_offset(lane_width);
                OrientedBox::new(center, h, o.half_extent[0], o.half_extent[1])
            })
            .collect();
        track.rays = RayIndex::build(&track);
        Ok(track)
    }

    pub fn road_half_width(&self) -> f64 {
        self.lane_width
    }

    /// Arc length wrapped into `[0, total_length)`.
    pub fn wrap(&self, s: f64) -> f64 {
        let r = s.rem_euclid(self.total_length);
        if r >= self.total_length {
            0.0
        } else {
            r
        }
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = self.wrap(s);
        let i = match self
            .cumulative
            .binary_search_by(|c| c.total_cmp(&s))
        {
            Ok(i) => i,
            Err(i) => i - 1,
        }
        .min(self.centerline.len() - 1);
        let u = (s - self.cumulative[i]) / self.segment_lengths[i];
        (i, u.clamp(0.0, 1.0))
    }

    fn tangent_at(&self, i: usize, u: f64) -> f64 {
        let n = self.centerline.len();
        let a = self.vertex_tangents[i];
        let b = self.vertex_tangents[(i + 1) % n];
        (a * (1.0 - u) + b * u).angle()
    }

    /// Centerline point and tangent heading at arc length `s` (wrapped).
    pub fn centerline_point(&self, s: f64) -> (Vec2, f64) {
        let (i, u) = self.locate(s);
        let n = self.centerline.len();
        let a = self.centerline[i];
        let b = self.centerline[(i + 1) % n];
        (a + (b - a) * u, self.tangent_at(i, u))
    }

    /// World point at arc length `s` and signed lateral offset.
    pub fn point_at(&self, s: f64, lateral: f64) -> Vec2 {
        let (c, h) = self.centerline_point(s);
        c + right_normal(h) * lateral
    }

    /// Signed curvature (positive turning left) by central difference of the tangent.
    pub fn curvature(&self, s: f64) -> f64 {
        let h = 2.5;
        let (_, a) = self.centerline_point(s - h);
        let (_, b) = self.centerline_point(s + h);
        wrap_angle(b - a) / (2.0 * h)
    }

    /// Nearest-segment projection; ties go to the smaller arc length.
    pub fn project(&self, p: Vec2) -> Result<Projection> {
        let n = self.centerline.len();
        let mut best = (f64::INFINITY, 0usize, 0.0f64);
        for i in 0..n {
            let a = self.centerline[i];
            let e = self.centerline[(i + 1) % n] - a;
            let u = ((p - a).dot(e) / e.norm_sq()).clamp(0.0, 1.0);
            let d2 = (a + e * u - p).norm_sq();
            if d2 < best.0 {
                best = (d2, i, u);
            }
        }
        let (d2, i, u) = best;
        let dist = d2.sqrt();
        if dist > PROJECTION_LIMIT {
            return Err(Error::OutOfDomain {
                distance: dist,
                limit: PROJECTION_LIMIT,
            });
        }
        let a = self.centerline[i];
        let e = self.centerline[(i + 1) % n] - a;
        let q = a + e * u;
        let side = (p - q).dot(-e.perp());
        let lateral = if side < 0.0 { -dist } else { dist };
        Ok(Projection {
            arc_length: self.wrap(self.cumulative[i] + u * self.segment_lengths[i]),
            lateral,
            tangent_heading: self.tangent_at(i, u),
        })
    }

    pub fn obstacle_boxes(&self) -> &[OrientedBox] {
        &self.obstacle_boxes
    }

    pub fn left_boundary(&self) -> &[Vec2] {
        &self.left_boundary
    }

    pub fn right_boundary(&self) -> &[Vec2] {
        &self.right_boundary
    }

    /// Distance to the first road boundary or obstacle edge along `dir`,
    /// capped at `max_range`.
    pub fn cast_ray(&self, origin: Vec2, dir: Vec2, max_range: f64) -> f64 {
        self.rays.cast(origin, dir, max_range)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TrackFile {
            id: self.id.clone(),
            lane_width: self.lane_width,
            centerline: self.centerline.iter().map(|p| [p.x, p.y]).collect(),
            obstacles: self.obstacles.clone(),
        };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Numerical(format!("track serialization: {e}")))?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TrackFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Track::new(
            file.id,
            file.centerline
                .into_iter()
                .map(|[x, y]| Vec2::new(x, y))
                .collect(),
            file.lane_width,
            file.obstacles,
        )
    }
}

/// Unit normal pointing to the right of a heading.
pub fn right_normal(heading: f64) -> Vec2 {
    let (s, c) = heading.sin_cos();
    Vec2::new(s, -c)
}

/// Uniform grid over all ray-blocking segments, traversed with a DDA.
#[derive(Debug, Clone, Default)]
struct RayIndex {
    origin: Vec2,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
    segments: Vec<(Vec2, Vec2)>,
}

impl RayIndex {
    fn build(track: &Track) -> Self {
        let mut segments = Vec::new();
        for b in [&track.left_boundary, &track.right_boundary] {
            for i in 0..b.len() {
                segments.push((b[i], b[(i + 1) % b.len()]));
            }
        }
        for ob in &track.obstacle_boxes {
            let c = ob.corners();
            for i in 0..4 {
                segments.push((c[i], c[(i + 1) % 4]));
            }
        }
        let (mut lo, mut hi) = (
            Vec2::new(f64::INFINITY, f64::INFINITY),
            Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        );
        for (a, b) in &segments {
            for p in [a, b] {
                lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
            }
        }
        let origin = lo - Vec2::new(RAY_CELL, RAY_CELL);
        let nx = ((hi.x - origin.x) / RAY_CELL).ceil() as usize + 1;
        let ny = ((hi.y - origin.y) / RAY_CELL).ceil() as usize + 1;
        let mut cells = vec![Vec::new(); nx * ny];
        for (k, (a, b)) in segments.iter().enumerate() {
            let x0 = ((a.x.min(b.x) - origin.x) / RAY_CELL).floor() as usize;
            let x1 = ((a.x.max(b.x) - origin.x) / RAY_CELL).floor() as usize;
            let y0 = ((a.y.min(b.y) - origin.y) / RAY_CELL).floor() as usize;
            let y1 = ((a.y.max(b.y) - origin.y) / RAY_CELL).floor() as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    cells[y * nx + x].push(k as u32);
                }
            }
        }
        RayIndex {
            origin,
            nx,
            ny,
            cells,
            segments,
        }
    }

    fn cast(&self, origin: Vec2, dir: Vec2, max_range: f64) -> f64 {
        let rel = origin - self.origin;
        let mut cx = (rel.x / RAY_CELL).floor() as i64;
        let mut cy = (rel.y / RAY_CELL).floor() as i64;
        let step_x: i64 = if dir.x >= 0.0 { 1 } else { -1 };
        let step_y: i64 = if dir.y >= 0.0 { 1 } else { -1 };
        let boundary = |c: i64, step: i64| (c + if step > 0 { 1 } else { 0 }) as f64 * RAY_CELL;
        let mut t_max_x = if dir.x.abs() < 1e-15 {
            f64::INFINITY
        } else {
            (boundary(cx, step_x) - rel.x) / dir.x
        };
        let mut t_max_y = if dir.y.abs() < 1e-15 {
            f64::INFINITY
        } else {
            (boundary(cy, step_y) - rel.y) / dir.y
        };
        let t_delta_x = if dir.x.abs() < 1e-15 {
            f64::INFINITY
        } else {
            RAY_CELL / dir.x.abs()
        };
        let t_delta_y = if dir.y.abs() < 1e-15 {
            f64::INFINITY
        } else {
            RAY_CELL / dir.y.abs()
        };
        let mut best = max_range;
        let mut t_enter = 0.0;
        while t_enter <= best {
            if cx >= 0 && cy >= 0 && (cx as usize) < self.nx && (cy as usize) < self.ny {
                for &k in &self.cells[cy as usize * self.nx + cx as usize] {
                    let (a, b) = self.segments[k as usize];
                    if let Some(t) = ray_segment(origin, dir, a, b) {
                        if t < best {
                            best = t;
                        }
                    }
                }
            } else if (cx < 0 && step_x < 0)
                || (cy < 0 && step_y < 0)
                || (cx >= self.nx as i64 && step_x > 0)
                || (cy >= self.ny as i64 && step_y > 0)
            {
                break;
            }
            let t_exit = t_max_x.min(t_max_y);
            if best <= t_exit {
                break;
            }
            t_enter = t_exit;
            if t_max_x < t_max_y {
                cx += step_x;
                t_max_x += t_delta_x;
            } else {
                cy += step_y;
                t_max_y += t_delta_y;
            }
        }
        best
    }
}

/// Closed loop of alternating straights and circular arcs, all turning left.
/// The pattern is repeated twice, which makes the loop point-symmetric and
/// therefore closed by construction.
#[derive(Debug, Clone)]
pub struct LoopShape {
    pub straights: Vec<f64>,
    pub radii: Vec<f64>,
}

impl LoopShape {
    pub fn length(&self) -> f64 {
        let turn = TAU / (2 * self.radii.len()) as f64;
        2.0 * (self.straights.iter().sum::<f64>() + self.radii.iter().sum::<f64>() * turn)
    }

    pub fn polyline(&self) -> Result<Vec<Vec2>> {
        if self.straights.len() != self.radii.len() || self.radii.is_empty() {
            return Err(Error::Invalid("loop shape needs matching straights and radii".into()));
        }
        let turn = TAU / (2 * self.radii.len()) as f64;
        let mut pts = vec![Vec2::ZERO];
        let mut pos = Vec2::ZERO;
        let mut heading: f64 = 0.0;
        for _ in 0..2 {
            for (&len, &r) in self.straights.iter().zip(&self.radii) {
                if len > 0.0 {
                    let k = (len / MAX_STRAIGHT_PIECE).ceil() as usize;
                    let start = pos;
                    let dir = Vec2::from_angle(heading);
                    for j in 1..=k {
                        pts.push(start + dir * (len * j as f64 / k as f64));
                    }
                    pos = start + dir * len;
                }
                let arc_len = r * turn;
                let k = (arc_len / MAX_ARC_PIECE).ceil() as usize;
                let center = pos + Vec2::from_angle(heading).perp() * r;
                let start_angle = heading - PI / 2.0;
                for j in 1..=k {
                    let a = start_angle + turn * j as f64 / k as f64;
                    pts.push(center + Vec2::from_angle(a) * r);
                }
                heading += turn;
                pos = center + Vec2::from_angle(start_angle + turn) * r;
            }
        }
        let closing = pts.pop().expect("nonempty");
        if closing.distance(pts[0]) > 1e-6 {
            return Err(Error::Numerical(format!(
                "loop does not close: gap {}",
                closing.distance(pts[0])
            )));
        }
        Ok(pts)
    }
}

/// Octagonal training loop: four straight lengths and four radii, each used twice.
fn training_shape() -> LoopShape {
    LoopShape {
        straights: vec![700.0, 250.0, 600.0, 305.0],
        radii: vec![80.0, 250.0, 120.0, 180.0],
    }
}

/// Obstacle arc lengths for the training loop. Each right-lane obstacle is
/// followed 150 m later by a left-lane one; 180 m or more separate a left
/// obstacle from the next right one.
pub const TRAINING_OBSTACLES: [(f64, Lane); 17] = [
    (300.0, Lane::Right),
    (450.0, Lane::Left),
    (630.0, Lane::Right),
    (780.0, Lane::Left),
    (960.0, Lane::Right),
    (1110.0, Lane::Left),
    (1400.0, Lane::Right),
    (1550.0, Lane::Left),
    (1900.0, Lane::Right),
    (2050.0, Lane::Left),
    (2500.0, Lane::Right),
    (2650.0, Lane::Left),
    (3000.0, Lane::Right),
    (3150.0, Lane::Left),
    (3500.0, Lane::Right),
    (3650.0, Lane::Left),
    (4100.0, Lane::Right),
];

/// The ~4.7 km two-lane training loop with 9 right-lane and 8 left-lane obstacles.
pub fn build_training_track() -> Track {
    let pts = training_shape().polyline().expect("training shape closes");
    let obstacles = TRAINING_OBSTACLES
        .iter()
        .map(|&(s, lane)| Obstacle::new(s, lane))
        .collect();
    Track::new("training", pts, LANE_WIDTH, obstacles).expect("training track is valid")
}

pub const DESK_LENGTH: f64 = 600.0;
pub const DESK_OBSTACLES: [(f64, Lane); 3] =
    [(60.0, Lane::Right), (260.0, Lane::Left), (400.0, Lane::Right)];

/// The 600 m desk-scale loop (rounded rectangle, radii 60 m and 45 m) with 3 obstacles.
pub fn build_desk_track() -> Track {
    let radii = vec![60.0, 45.0];
    let arcs: f64 = radii.iter().sum::<f64>() * PI / 2.0 * 2.0;
    let short = 40.0;
    let long = (DESK_LENGTH - arcs) / 2.0 - short;
    let shape = LoopShape {
        straights: vec![long, short],
        radii,
    };
    let obstacles = DESK_OBSTACLES
        .iter()
        .map(|&(s, lane)| Obstacle::new(s, lane))
        .collect();
    Track::new("desk", shape.polyline().expect("desk shape closes"), LANE_WIDTH, obstacles)
        .expect("desk track is valid")
}

/// Geometry for generated roads: the training octagon rescaled to `length`,
/// with radii never below 12 m.
fn generated_shape(length: f64) -> LoopShape {
    let base = training_shape();
    let scale = (length / base.length()).max(0.15);
    let radii: Vec<f64> = base.radii.iter().map(|r| r * scale).collect();
    let turn = TAU / (2 * radii.len()) as f64;
    let arcs = 2.0 * radii.iter().sum::<f64>() * turn;
    let base_straights: f64 = base.straights.iter().sum();
    let remaining = (length - arcs).max(0.0) / 2.0;
    LoopShape {
        straights: base
            .straights
            .iter()
            .map(|l| l / base_straights * remaining)
            .collect(),
        radii,
    }
}

const BATCH_SPACING: f64 = 10.0;
const MIN_GAP: f64 = 20.0;
const END_MARGIN: f64 = 25.0;

/// Builds a track from a road spec. Pure function of the spec (seed included).
pub fn generate_road(spec: &RoadSpec) -> Result<Track> {
    spec.validate()?;
    if spec.kind == RoadKind::Training {
        return Ok(build_training_track());
    }
    let shape = generated_shape(spec.length);
    let pts = shape.polyline()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gap_dist = Normal::new(spec.spacing_mean, spec.spacing_std)
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let draw_gap = |rng: &mut ChaCha8Rng| loop {
        let g = gap_dist.sample(rng);
        if g > MIN_GAP {
            break g;
        }
    };
    let coin = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.5) {
            Lane::Right
        } else {
            Lane::Left
        }
    };
    // Arc length of the generated polyline differs from `spec.length` by chord error.
    let probe = Track::new("probe", pts.clone(), LANE_WIDTH, Vec::new())?;
    let length = probe.total_length;
    let mut obstacles = Vec::new();
    match spec.kind {
        RoadKind::Training => unreachable!(),
        RoadKind::Alternating50m => {
            let count = (spec.length / 50.0).floor() as usize;
            for k in 0..count {
                let s = 25.0 + 50.0 * k as f64;
                if s >= length {
                    break;
                }
                let lane = if k % 2 == 0 { Lane::Right } else { Lane::Left };
                obstacles.push(Obstacle::new(s, lane));
            }
        }
        RoadKind::GaussianSpaced => {
            let mut s = draw_gap(&mut rng);
            while s < length - END_MARGIN {
                obstacles.push(Obstacle::new(s, coin(&mut rng)));
                s += draw_gap(&mut rng);
            }
        }
        RoadKind::GaussianBatched => {
            let (lo, hi) = spec.batch_range;
            let mut s = draw_gap(&mut rng);
            loop {
                let size = rng.random_range(lo..=hi) as usize;
                let lane = coin(&mut rng);
                let last = s + BATCH_SPACING * (size - 1) as f64;
                if last >= length - END_MARGIN {
                    break;
                }
                for k in 0..size {
                    obstacles.push(Obstacle::new(s + BATCH_SPACING * k as f64, lane));
                }
                s = last + draw_gap(&mut rng);
            }
        }
    }
    let id = format!("{}-{}-{}", spec.kind, spec.length, spec.seed);
    Track::new(id, pts, LANE_WIDTH, obstacles)
}

/// Resolves a named track id: `training`, `desk`, or `<kind>-<length>-<seed>`.
pub fn track_by_id(id: &str) -> Result<Track> {
    match id {
        "training" => Ok(build_training_track()),
        "desk" => Ok(build_desk_track()),
        other => {
            let mut parts = other.rsplitn(3, '-');
            let seed = parts.next();
            let length = parts.next();
            let kind = parts.next();
            match (kind, length, seed) {
                (Some(kind), Some(length), Some(seed)) => {
                    let kind: RoadKind = kind.parse()?;
                    let length: f64 = length
                        .parse()
                        .map_err(|_| Error::Invalid(format!("unknown track id `{id}`")))?;
                    let seed: u64 = seed
                        .parse()
                        .map_err(|_| Error::Invalid(format!("unknown track id `{id}`")))?;
                    generate_road(&RoadSpec::new(kind, seed).with_length(length))
                }
                _ => Err(Error::Invalid(format!("unknown track id `{id}`"))),
            }
        }
    }
}

/// Forward arc-length gap from `from` to `to` on a loop of length `total`.
pub fn forward_gap(from: f64, to: f64, total: f64) -> f64 {
    (to - from).rem_euclid(total)
}
