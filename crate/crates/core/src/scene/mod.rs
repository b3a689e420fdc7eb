//! Scenario data model: tracks of timestamped positions plus a polygonal map.

pub(crate) mod io;
mod synthetic;

use std::collections::HashSet;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use io::{
    load_scenarios, parse_map, parse_track, save_scenarios, write_map, write_track, PolygonRecord,
    TrackRecord,
};
pub use synthetic::{generate_synthetic, Behavior, BehaviorMix, GeneratorConfig};

/// Sampling rate of every scenario.
pub const FREQ_HZ: u32 = 10;
/// Seconds between consecutive timesteps.
pub const DT: f64 = 1.0 / FREQ_HZ as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AgentType {
    Padding = 0,
    Pedestrian = 1,
    Vehicle = 2,
    Cyclist = 3,
    Other = 4,
}

impl AgentType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Option<Self> {
        Some(match code {
            0 => AgentType::Padding,
            1 => AgentType::Pedestrian,
            2 => AgentType::Vehicle,
            3 => AgentType::Cyclist,
            4 => AgentType::Other,
            _ => return None,
        })
    }
}

/// Sample-local track label. Never present on raw scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackLabel {
    Fragment = 0,
    Unscored = 1,
    Scored = 2,
}

impl TrackLabel {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Option<Self> {
        Some(match code {
            0 => TrackLabel::Fragment,
            1 => TrackLabel::Unscored,
            2 => TrackLabel::Scored,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolygonType {
    DrivableArea = 1,
    LaneSegment = 2,
    Crosswalk = 3,
    FreeSpace = 4,
}

impl PolygonType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Option<Self> {
        Some(match code {
            1 => PolygonType::DrivableArea,
            2 => PolygonType::LaneSegment,
            3 => PolygonType::Crosswalk,
            4 => PolygonType::FreeSpace,
            _ => return None,
        })
    }
}

/// One observation on the 10 Hz grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub t: i64,
    pub x: f64,
    pub y: f64,
}

impl TrackState {
    pub fn new(t: i64, x: f64, y: f64) -> Self {
        TrackState { t, x, y }
    }

    pub fn pos(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// A single agent. Missing timesteps are occlusions.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: String,
    pub agent_type: AgentType,
    pub states: Vec<TrackState>,
    pub label: Option<TrackLabel>,
}

impl Track {
    pub fn new(id: impl Into<String>, agent_type: AgentType, states: Vec<TrackState>) -> Self {
        Track {
            id: id.into(),
            agent_type,
            states,
            label: None,
        }
    }

    pub fn state_at(&self, t: i64) -> Option<&TrackState> {
        self.states
            .binary_search_by_key(&t, |s| s.t)
            .ok()
            .map(|i| &self.states[i])
    }

    /// Whether every timestep in `lo..=hi` is observed.
    pub fn covers(&self, lo: i64, hi: i64) -> bool {
        match self.states.binary_search_by_key(&lo, |s| s.t) {
            Ok(i) => {
                let n = (hi - lo + 1) as usize;
                i + n <= self.states.len() && self.states[i + n - 1].t == hi
            }
            Err(_) => false,
        }
    }

    /// Latest two states at or before `t`, used for one-step velocities.
    pub fn last_two_until(&self, t: i64) -> (Option<&TrackState>, Option<&TrackState>) {
        let end = self.states.partition_point(|s| s.t <= t);
        let last = end.checked_sub(1).map(|i| &self.states[i]);
        let prev = end.checked_sub(2).map(|i| &self.states[i]);
        (prev, last)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::validation(format!(
                "track `{}` has no states",
                self.id
            )));
        }
        for w in self.states.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::validation(format!(
                    "track `{}`: timesteps not strictly increasing at t={}",
                    self.id, w[1].t
                )));
            }
        }
        if let Some(s) = self
            .states
            .iter()
            .find(|s| !s.x.is_finite() || !s.y.is_finite())
        {
            return Err(Error::validation(format!(
                "track `{}`: non-finite coordinate at t={}",
                self.id, s.t
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapPolygon {
    pub id: i64,
    pub ptype: PolygonType,
    pub points: Vec<[f64; 2]>,
}

impl MapPolygon {
    /// Consecutive point pairs.
    pub fn segments(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }
}

pub type Map = Arc<[MapPolygon]>;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub freq_hz: u32,
    pub tracks: Vec<Track>,
    pub map: Map,
}

impl Scenario {
    /// Number of timesteps spanned, counting from t = 0.
    pub fn length(&self) -> i64 {
        self.tracks
            .iter()
            .filter_map(|tr| tr.states.last())
            .map(|s| s.t + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn track(&self, id: &str) -> Option<&Track> {
        self.tracks.iter().find(|t| t.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.freq_hz != FREQ_HZ {
            return Err(Error::validation(format!(
                "scenario `{}`: freq_hz must be {FREQ_HZ}, got {}",
                self.id, self.freq_hz
            )));
        }
        let mut seen = HashSet::new();
        for tr in &self.tracks {
            if !seen.insert(tr.id.as_str()) {
                return Err(Error::validation(format!(
                    "scenario `{}`: duplicate track id `{}`",
                    self.id, tr.id
                )));
            }
            if tr.agent_type == AgentType::Padding {
                return Err(Error::validation(format!(
                    "scenario `{}`: track `{}` has PADDING type",
                    self.id, tr.id
                )));
            }
            if tr.label.is_some() {
                return Err(Error::validation(format!(
                    "scenario `{}`: track `{}` carries a label outside a sample",
                    self.id, tr.id
                )));
            }
            tr.validate()?;
            if tr.states[0].t < 0 {
                return Err(Error::validation(format!(
                    "scenario `{}`: track `{}` has negative timestep",
                    self.id, tr.id
                )));
            }
        }
        validate_map(&self.map, &self.id)
    }
}

pub(crate) fn validate_map(map: &[MapPolygon], owner: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for poly in map {
        if !seen.insert(poly.id) {
            return Err(Error::validation(format!(
                "`{owner}`: duplicate polygon id {}",
                poly.id
            )));
        }
        if poly.points.len() < 2 {
            return Err(Error::validation(format!(
                "`{owner}`: polygon {} has fewer than 2 points",
                poly.id
            )));
        }
        if poly.points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::validation(format!(
                "`{owner}`: polygon {} has a non-finite point",
                poly.id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(ts: &[i64]) -> Track {
        Track::new(
            "a",
            AgentType::Pedestrian,
            ts.iter()
                .map(|&t| TrackState::new(t, t as f64, 0.0))
                .collect(),
        )
    }

    #[test]
    fn covers_detects_gaps() {
        let tr = track(&[0, 1, 2, 4, 5]);
        assert!(tr.covers(0, 2));
        assert!(!tr.covers(0, 4));
        assert!(tr.covers(4, 5));
        assert!(!tr.covers(5, 6));
        assert!(tr.state_at(3).is_none());
    }

    #[test]
    fn last_two_skips_future() {
        let tr = track(&[0, 3, 7, 12]);
        let (p, l) = tr.last_two_until(9);
        assert_eq!(p.unwrap().t, 3);
        assert_eq!(l.unwrap().t, 7);
        let (p, l) = tr.last_two_until(0);
        assert!(p.is_none());
        assert_eq!(l.unwrap().t, 0);
    }

    #[test]
    fn non_increasing_timesteps_rejected() {
        let tr = track(&[0, 2, 2]);
        assert!(tr.validate().is_err());
    }

    #[test]
    fn codes_are_stable() {
        for c in 0..5 {
            assert_eq!(AgentType::from_code(c).unwrap().code() as i64, c);
        }
        for c in 1..5 {
            assert_eq!(PolygonType::from_code(c).unwrap().code() as i64, c);
        }
        assert!(PolygonType::from_code(0).is_none());
        assert!(TrackLabel::from_code(3).is_none());
    }
}
