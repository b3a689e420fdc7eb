//! Agent-centric feature extraction.
//!
//! Everything is expressed in the focal frame: origin at the focal agent's
//! current position, +x along its current heading.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchmark::{Sample, CURRENT_T, OBS_STEPS};
use crate::error::{Error, Result};
use crate::scene::{AgentType, MapPolygon, Track, TrackLabel, DT};

pub const SOCIAL_ROWS: usize = 8;
pub const SOCIAL_COLS: usize = 1 + 2 * OBS_STEPS;
pub const NEIGHBORS: usize = SOCIAL_ROWS - 1;
pub const MAP_COLS: usize = 6;
pub const MAP_ROWS: usize = 100;
pub const MAP_RADIUS: f64 = 20.0;

const MIN_DISPLACEMENT: f64 = 1e-6;
const MIN_SPEED: f64 = 1e-6;
const MIN_RANGE: f64 = 1e-6;
/// Distances closer than this are ordered by id, so that rounding noise from
/// a rigid transform cannot reorder coincident map segments or agents.
const DISTANCE_QUANTUM: f64 = 1e-9;

fn distance_key(d: f64) -> i64 {
    (d / DISTANCE_QUANTUM).round() as i64
}

pub type Point = [f64; 2];

#[inline]
fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

/// Rigid transform from scene coordinates into the focal frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalFrame {
    pub origin: Point,
    /// Angle in (-pi, pi] that rotates the focal heading onto +x.
    pub rotation: f64,
    cos: f64,
    sin: f64,
}

impl FocalFrame {
    pub fn new(origin: Point, rotation: f64) -> Self {
        FocalFrame {
            origin,
            rotation,
            cos: rotation.cos(),
            sin: rotation.sin(),
        }
    }

    /// Frame whose +x axis is the direction of `heading` (non-zero).
    fn from_heading(origin: Point, heading: Point) -> Self {
        let n = norm(heading);
        let mut rotation = -heading[1].atan2(heading[0]);
        if rotation <= -std::f64::consts::PI {
            rotation = std::f64::consts::PI;
        }
        FocalFrame {
            origin,
            rotation,
            cos: heading[0] / n,
            sin: -heading[1] / n,
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        self.rotate(sub(p, self.origin))
    }

    /// Rotation only, for velocities.
    pub fn rotate(&self, v: Point) -> Point {
        [
            self.cos * v[0] - self.sin * v[1],
            self.sin * v[0] + self.cos * v[1],
        ]
    }

    /// Maps a focal-frame point back to scene coordinates.
    pub fn invert(&self, p: Point) -> Point {
        [
            self.cos * p[0] + self.sin * p[1] + self.origin[0],
            -self.sin * p[0] + self.cos * p[1] + self.origin[1],
        ]
    }
}

fn scored_focal<'a>(sample: &'a Sample, focal_id: &str) -> Result<&'a Track> {
    let track = sample.track(focal_id).ok_or_else(|| {
        Error::Lookup(format!("focal `{focal_id}` not in sample `{}`", sample.id))
    })?;
    if track.label != Some(TrackLabel::Scored) {
        return Err(Error::Lookup(format!(
            "focal `{focal_id}` in sample `{}` is not a scored track",
            sample.id
        )));
    }
    Ok(track)
}

/// Origin at local t = 9, heading from the t = 8 -> 9 displacement, falling
/// back to the earliest-to-latest observed displacement, then to rotation 0.
pub fn focal_frame(sample: &Sample, focal_id: &str) -> Result<FocalFrame> {
    let track = scored_focal(sample, focal_id)?;
    let cur = track
        .state_at(CURRENT_T)
        .ok_or_else(|| Error::Lookup(format!("focal `{focal_id}` has no current state")))?
        .pos();
    let step = track.state_at(CURRENT_T - 1).map(|s| sub(cur, s.pos()));
    if let Some(d) = step.filter(|d| norm(*d) >= MIN_DISPLACEMENT) {
        return Ok(FocalFrame::from_heading(cur, d));
    }
    let earliest = track
        .states
        .iter()
        .find(|s| s.t <= CURRENT_T)
        .map(|s| s.pos());
    match earliest.map(|e| sub(cur, e)) {
        Some(d) if norm(d) >= MIN_DISPLACEMENT => Ok(FocalFrame::from_heading(cur, d)),
        _ => Ok(FocalFrame::new(cur, 0.0)),
    }
}

/// Time and distance to closest approach under constant relative velocity.
pub fn ttca_dca(p_rel: Point, v_rel: Point) -> (f64, f64) {
    let vv = dot(v_rel, v_rel);
    if vv.sqrt() < MIN_SPEED {
        return (0.0, norm(p_rel));
    }
    let ttca = (-dot(p_rel, v_rel) / vv).max(0.0);
    let closest = [p_rel[0] + v_rel[0] * ttca, p_rel[1] + v_rel[1] * ttca];
    (ttca, norm(closest))
}

/// Time derivative of the bearing angle `atan2(p_rel)`.
pub fn bearing_rate(p_rel: Point, v_rel: Point) -> f64 {
    let rr = dot(p_rel, p_rel);
    if rr.sqrt() < MIN_RANGE {
        return 0.0;
    }
    (p_rel[0] * v_rel[1] - p_rel[1] * v_rel[0]) / rr
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskParams {
    pub delta_ttca: f64,
    pub delta_dca: f64,
    pub delta_alpha_dot: f64,
}

impl Default for RiskParams {
    fn default() -> Self {
        RiskParams {
            delta_ttca: 1.8,
            delta_dca: 0.3,
            delta_alpha_dot: 2.0,
        }
    }
}

impl RiskParams {
    pub fn validate(&self) -> Result<()> {
        if [self.delta_ttca, self.delta_dca, self.delta_alpha_dot]
            .iter()
            .all(|d| *d > 0.0 && d.is_finite())
        {
            Ok(())
        } else {
            Err(Error::validation("risk parameters must be positive"))
        }
    }
}

/// Gaussian falloff in ttca, dca and bearing rate; 1 at (0, 0, 0).
pub fn collision_risk(ttca: f64, dca: f64, alpha_dot: f64, params: &RiskParams) -> f64 {
    let a = ttca / params.delta_ttca;
    let b = dca / params.delta_dca;
    let c = alpha_dot / params.delta_alpha_dot;
    (-(a * a) - b * b - c * c).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    L2,
    Risk,
    None,
}

impl Selection {
    pub fn name(self) -> &'static str {
        match self {
            Selection::L2 => "l2",
            Selection::Risk => "risk",
            Selection::None => "none",
        }
    }
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Selection::L2),
            "risk" => Ok(Selection::Risk),
            "none" => Ok(Selection::None),
            other => Err(Error::validation(format!(
                "unknown selection criteria `{other}` (expected l2, risk or none)"
            ))),
        }
    }
}

/// Velocity from the latest one-step displacement at or before t = 9.
fn velocity_at_current(track: &Track) -> Point {
    match track.last_two_until(CURRENT_T) {
        (Some(a), Some(b)) => {
            let dt = (b.t - a.t) as f64 * DT;
            [(b.x - a.x) / dt, (b.y - a.y) / dt]
        }
        _ => [0.0, 0.0],
    }
}

struct Candidate<'a> {
    id: &'a str,
    dist: f64,
    risk: f64,
}

/// Up to `k` neighbor track ids, most relevant first.
pub fn select_neighbors(
    sample: &Sample,
    focal_id: &str,
    criteria: Selection,
    k: usize,
    params: &RiskParams,
) -> Result<Vec<String>> {
    let focal = sample.track(focal_id).ok_or_else(|| {
        Error::Lookup(format!("focal `{focal_id}` not in sample `{}`", sample.id))
    })?;
    if criteria == Selection::None {
        return Ok(Vec::new());
    }
    let fpos = focal
        .state_at(CURRENT_T)
        .ok_or_else(|| Error::Lookup(format!("focal `{focal_id}` has no current state")))?
        .pos();
    let fvel = velocity_at_current(focal);
    let mut cands: Vec<Candidate> = sample
        .tracks
        .iter()
        .filter(|t| t.id != focal_id)
        .filter_map(|t| {
            let p = t.state_at(CURRENT_T)?.pos();
            let p_rel = sub(p, fpos);
            let risk = if criteria == Selection::Risk {
                let v_rel = sub(velocity_at_current(t), fvel);
                let (ttca, dca) = ttca_dca(p_rel, v_rel);
                collision_risk(ttca, dca, bearing_rate(p_rel, v_rel), params)
            } else {
                0.0
            };
            Some(Candidate {
                id: &t.id,
                dist: norm(p_rel),
                risk,
            })
        })
        .collect();
    let by_distance = |a: &Candidate, b: &Candidate| {
        distance_key(a.dist)
            .cmp(&distance_key(b.dist))
            .then_with(|| a.id.cmp(b.id))
    };
    match criteria {
        Selection::L2 => cands.sort_by(by_distance),
        Selection::Risk => {
            cands.sort_by(|a, b| b.risk.total_cmp(&a.risk).then_with(|| by_distance(a, b)))
        }
        Selection::None => unreachable!(),
    }
    Ok(cands
        .into_iter()
        .take(k)
        .map(|c| c.id.to_string())
        .collect())
}

/// 8 x 21 agent matrix: `[type, x9, y9, x8, y8, ..., x0, y0]` per row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocialMatrix {
    pub values: [[f64; SOCIAL_COLS]; SOCIAL_ROWS],
}

impl Default for SocialMatrix {
    fn default() -> Self {
        SocialMatrix {
            values: [[0.0; SOCIAL_COLS]; SOCIAL_ROWS],
        }
    }
}

impl SocialMatrix {
    /// Column of the x coordinate for local timestep `t` (0..=9).
    pub fn x_col(t: usize) -> usize {
        1 + 2 * (OBS_STEPS - 1 - t)
    }

    pub fn is_padding(&self, row: usize) -> bool {
        self.values[row][0] == AgentType::Padding.code() as f64
    }

    /// Zero-fills every position older than the `keep` most recent steps.
    pub fn truncate_history(&mut self, keep: usize) {
        let first = 1 + 2 * keep.min(OBS_STEPS);
        for row in &mut self.values {
            row[first..].fill(0.0);
        }
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }
}

fn fill_row(row: &mut [f64; SOCIAL_COLS], track: &Track, frame: &FocalFrame) {
    row[0] = track.agent_type.code() as f64;
    for t in 0..OBS_STEPS {
        if let Some(s) = track.state_at(t as i64) {
            let [x, y] = frame.apply(s.pos());
            let c = SocialMatrix::x_col(t);
            row[c] = x;
            row[c + 1] = y;
        }
    }
}

pub fn social_matrix(
    sample: &Sample,
    focal_id: &str,
    frame: &FocalFrame,
    criteria: Selection,
    params: &RiskParams,
) -> Result<SocialMatrix> {
    let focal = scored_focal(sample, focal_id)?;
    let mut m = SocialMatrix::default();
    fill_row(&mut m.values[0], focal, frame);
    // the origin is the focal position by construction
    m.values[0][1] = 0.0;
    m.values[0][2] = 0.0;
    let neighbors = select_neighbors(sample, focal_id, criteria, NEIGHBORS, params)?;
    for (row, id) in m.values[1..].iter_mut().zip(&neighbors) {
        let track = sample.track(id).expect("selected from sample");
        fill_row(row, track, frame);
    }
    Ok(m)
}

/// Polyline rows `[type, polygon id, x_start, y_start, x_end, y_end]`,
/// nearest first; unused rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MapMatrix {
    pub rows: Vec<[f64; MAP_COLS]>,
}

impl MapMatrix {
    pub fn zeros(capacity: usize) -> Self {
        MapMatrix {
            rows: vec![[0.0; MAP_COLS]; capacity],
        }
    }

    /// Rows carrying a polyline (non-zero type code).
    pub fn used(&self) -> usize {
        self.rows.iter().take_while(|r| r[0] != 0.0).count()
    }

    pub fn is_padding(&self, row: usize) -> bool {
        self.rows[row][0] == 0.0
    }
}

/// Distance from `p` to segment `ab`. Endpoint clamps reuse the plain point
/// distance so segments sharing a vertex produce identical values.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 == 0.0 {
        return norm(sub(p, a));
    }
    let u = dot(sub(p, a), ab) / len2;
    if u <= 0.0 {
        norm(sub(p, a))
    } else if u >= 1.0 {
        norm(sub(p, b))
    } else {
        norm(sub(p, [a[0] + u * ab[0], a[1] + u * ab[1]]))
    }
}

pub fn map_matrix(
    map: &[MapPolygon],
    frame: &FocalFrame,
    radius: f64,
    max_lines: usize,
) -> MapMatrix {
    let mut lines: Vec<(i64, i64, usize, &MapPolygon, Point, Point)> = Vec::new();
    for poly in map {
        for (i, (a, b)) in poly.segments().enumerate() {
            let d = point_segment_distance(frame.origin, a, b);
            if d <= radius {
                lines.push((distance_key(d), poly.id, i, poly, a, b));
            }
        }
    }
    lines.sort_by_key(|x| (x.0, x.1, x.2));
    let mut m = MapMatrix::zeros(max_lines);
    for (row, (_, id, _, poly, a, b)) in m.rows.iter_mut().zip(lines) {
        let [xs, ys] = frame.apply(a);
        let [xe, ye] = frame.apply(b);
        *row = [poly.ptype.code() as f64, id as f64, xs, ys, xe, ye];
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub selection: Selection,
    pub neighbors: usize,
    pub map_radius: f64,
    pub map_rows: usize,
    pub risk: RiskParams,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            selection: Selection::L2,
            neighbors: NEIGHBORS,
            map_radius: MAP_RADIUS,
            map_rows: MAP_ROWS,
            risk: RiskParams::default(),
        }
    }
}

/// Features of one focal agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub frame: FocalFrame,
    pub social: SocialMatrix,
    pub map: MapMatrix,
}

pub fn extract(sample: &Sample, focal_id: &str, cfg: &FeatureConfig) -> Result<Features> {
    if cfg.neighbors > NEIGHBORS {
        return Err(Error::validation(format!(
            "at most {NEIGHBORS} neighbors fit the social matrix"
        )));
    }
    let frame = focal_frame(sample, focal_id)?;
    let mut social = social_matrix(sample, focal_id, &frame, cfg.selection, &cfg.risk)?;
    for row in &mut social.values[1 + cfg.neighbors..] {
        *row = [0.0; SOCIAL_COLS];
    }
    let map = map_matrix(&sample.map, &frame, cfg.map_radius, cfg.map_rows);
    Ok(Features { frame, social, map })
}

const DUMP_MAGIC: &[u8; 4] = b"SNPF";
const DUMP_VERSION: u32 = 1;

/// Debug dump: magic, u32 version, then the 8x21 and 100x6 matrices as
/// row-major little-endian f64.
pub fn write_feature_dump(
    path: impl AsRef<Path>,
    social: &SocialMatrix,
    map: &MapMatrix,
) -> Result<()> {
    let path = path.as_ref();
    if map.rows.len() != MAP_ROWS {
        return Err(Error::validation(format!(
            "feature dump requires {MAP_ROWS} map rows"
        )));
    }
    let mut buf = Vec::with_capacity(8 + 8 * (SOCIAL_ROWS * SOCIAL_COLS + MAP_ROWS * MAP_COLS));
    buf.extend_from_slice(DUMP_MAGIC);
    buf.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    for v in social.flat().chain(map.rows.iter().flatten().copied()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_dump(path: impl AsRef<Path>) -> Result<(SocialMatrix, MapMatrix)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != DUMP_MAGIC {
        return Err(Error::Format("not a feature dump".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(Error::Format(format!("feature dump version {version}")));
    }
    let n = SOCIAL_ROWS * SOCIAL_COLS + MAP_ROWS * MAP_COLS;
    if bytes.len() != 8 + 8 * n {
        return Err(Error::Corrupt("feature dump length".into()));
    }
    let vals: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut social = SocialMatrix::default();
    for (i, v) in vals[..SOCIAL_ROWS * SOCIAL_COLS].iter().enumerate() {
        social.values[i / SOCIAL_COLS][i % SOCIAL_COLS] = *v;
    }
    let mut map = MapMatrix::zeros(MAP_ROWS);
    for (i, v) in vals[SOCIAL_ROWS * SOCIAL_COLS..].iter().enumerate() {
        map.rows[i / MAP_COLS][i % MAP_COLS] = *v;
    }
    Ok((social, map))
}
