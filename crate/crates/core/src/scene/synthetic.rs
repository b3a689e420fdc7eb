//! Deterministic synthetic scenarios on a straight two-lane road.
//!
//! The road runs along the local x axis with sidewalks on both sides and one
//! to three crosswalks. Each scenario is then placed in the world by a random
//! rigid transform. Track ids encode the generating behavior
//! (`ped-cv-3`, `ped-turn-0`, ...), see [`Behavior::from_track_id`].

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentType, MapPolygon, PolygonType, Scenario, Track, TrackState, DT, FREQ_HZ};
use crate::error::{Error, Result};

const ROAD_HALF_LENGTH: f64 = 60.0;
const LANE_WIDTH: f64 = 3.5;
const SIDEWALK_WIDTH: f64 = 3.0;
const CROSSWALK_WIDTH: f64 = 4.0;
const EDGE_STEP: f64 = 10.0;
const LANE_SECTION: f64 = 20.0;

/// Generating behavior of a synthetic agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Behavior {
    /// Pedestrian walking at constant velocity.
    ConstantVelocity,
    /// Pedestrian that halts for a while and then resumes.
    StopAndWait,
    /// Pedestrian walking along a sidewalk who turns onto a crosswalk.
    CrosswalkTurn,
    /// Vehicle driving its lane at constant speed.
    Vehicle,
}

impl Behavior {
    fn tag(self) -> &'static str {
        match self {
            Behavior::ConstantVelocity => "ped-cv",
            Behavior::StopAndWait => "ped-stop",
            Behavior::CrosswalkTurn => "ped-turn",
            Behavior::Vehicle => "veh",
        }
    }

    pub fn from_track_id(id: &str) -> Option<Self> {
        let (tag, _) = id.rsplit_once('-')?;
        Some(match tag {
            "ped-cv" => Behavior::ConstantVelocity,
            "ped-stop" => Behavior::StopAndWait,
            "ped-turn" => Behavior::CrosswalkTurn,
            "veh" => Behavior::Vehicle,
            _ => return None,
        })
    }
}

/// Relative weights of the agent behaviors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorMix {
    pub constant_velocity: f64,
    pub stop_and_wait: f64,
    pub crosswalk_turn: f64,
    pub vehicle: f64,
}

impl Default for BehaviorMix {
    fn default() -> Self {
        BehaviorMix {
            constant_velocity: 0.35,
            stop_and_wait: 0.15,
            crosswalk_turn: 0.3,
            vehicle: 0.2,
        }
    }
}

impl BehaviorMix {
    fn weights(&self) -> [(Behavior, f64); 4] {
        [
            (Behavior::ConstantVelocity, self.constant_velocity),
            (Behavior::StopAndWait, self.stop_and_wait),
            (Behavior::CrosswalkTurn, self.crosswalk_turn),
            (Behavior::Vehicle, self.vehicle),
        ]
    }

    fn draw(&self, rng: &mut impl Rng) -> Behavior {
        let w = self.weights();
        let total: f64 = w.iter().map(|x| x.1).sum();
        let mut u = rng.gen::<f64>() * total;
        for (b, wt) in w {
            if u < wt {
                return b;
            }
            u -= wt;
        }
        // only reachable through rounding at the upper end
        w.iter().rev().find(|x| x.1 > 0.0).map(|x| x.0).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_scenarios: usize,
    pub agents_per_scenario: usize,
    /// Timesteps per scenario; 110 mirrors 11 s at 10 Hz.
    pub length: usize,
    pub mix: BehaviorMix,
    /// Probability that a track is only visible over a sub-interval.
    pub partial_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_scenarios: 100,
            agents_per_scenario: 8,
            length: 110,
            mix: BehaviorMix::default(),
            partial_fraction: 0.15,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::validation(
                "generator: scenario length must be positive",
            ));
        }
        if self.agents_per_scenario == 0 {
            return Err(Error::validation(
                "generator: agents per scenario must be positive",
            ));
        }
        let w = self.mix.weights();
        if w.iter().any(|x| !(x.1 >= 0.0) || !x.1.is_finite()) || w.iter().all(|x| x.1 == 0.0) {
            return Err(Error::validation(
                "generator: behavior weights must be non-negative with a positive sum",
            ));
        }
        if !(0.0..=1.0).contains(&self.partial_fraction) {
            return Err(Error::validation(
                "generator: partial_fraction must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Generates `config.num_scenarios` scenarios; scenario `i` is seeded with `seed + i`.
pub fn generate_synthetic(config: &GeneratorConfig, seed: u64) -> Result<Vec<Scenario>> {
    config.validate()?;
    Ok((0..config.num_scenarios)
        .map(|i| generate_one(config, seed.wrapping_add(i as u64), i))
        .collect())
}

struct Placement {
    cos: f64,
    sin: f64,
    tx: f64,
    ty: f64,
}

impl Placement {
    fn apply(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        [
            self.cos * x - self.sin * y + self.tx,
            self.sin * x + self.cos * y + self.ty,
        ]
    }
}

fn generate_one(config: &GeneratorConfig, seed: u64, index: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let place = Placement {
        cos: theta.cos(),
        sin: theta.sin(),
        tx: rng.gen_range(-100.0..100.0),
        ty: rng.gen_range(-100.0..100.0),
    };

    let n_cross = rng.gen_range(1..=3usize);
    let mut crossings: Vec<f64> = Vec::with_capacity(n_cross);
    while crossings.len() < n_cross {
        let cx: f64 = rng.gen_range(-30.0..30.0);
        if crossings.iter().all(|c| (c - cx).abs() >= 12.0) {
            crossings.push(cx);
        }
    }
    crossings.sort_by(f64::total_cmp);

    let map = build_map(&crossings)
        .into_iter()
        .map(|mut p| {
            p.points = p.points.into_iter().map(|q| place.apply(q)).collect();
            p
        })
        .collect::<Vec<_>>();

    let len = config.length as i64;
    let tracks = (0..config.agents_per_scenario)
        .map(|k| {
            let behavior = config.mix.draw(&mut rng);
            let (agent_type, path) = agent_path(behavior, &crossings, len, &mut rng);
            let (lo, hi) = if rng.gen::<f64>() < config.partial_fraction && len > 5 {
                let a = rng.gen_range(0..len - 5);
                let b = rng.gen_range(a + 4..len);
                (a, b)
            } else {
                (0, len - 1)
            };
            let states = (lo..=hi)
                .map(|t| {
                    let [x, y] = place.apply(path(t));
                    TrackState::new(t, x, y)
                })
                .collect();
            Track::new(format!("{}-{k}", behavior.tag()), agent_type, states)
        })
        .collect();

    Scenario {
        id: format!("syn{seed:06}-{index:05}"),
        freq_hz: FREQ_HZ,
        tracks,
        map: Arc::from(map),
    }
}

type PathFn = Box<dyn Fn(i64) -> [f64; 2]>;

fn agent_path(
    behavior: Behavior,
    crossings: &[f64],
    len: i64,
    rng: &mut ChaCha8Rng,
) -> (AgentType, PathFn) {
    match behavior {
        Behavior::ConstantVelocity => {
            let (x0, y0, vx, vy) = random_walker(rng);
            (
                AgentType::Pedestrian,
                Box::new(move |t| [x0 + vx * t as f64 * DT, y0 + vy * t as f64 * DT]),
            )
        }
        Behavior::StopAndWait => {
            let (x0, y0, vx, vy) = random_walker(rng);
            let stop = rng.gen_range(len / 5..=len * 3 / 4);
            let wait = rng.gen_range(10..=40i64);
            (
                AgentType::Pedestrian,
                Box::new(move |t| {
                    let moving = if t <= stop {
                        t
                    } else if t <= stop + wait {
                        stop
                    } else {
                        t - wait
                    };
                    [x0 + vx * moving as f64 * DT, y0 + vy * moving as f64 * DT]
                }),
            )
        }
        Behavior::CrosswalkTurn => {
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let cx = crossings[rng.gen_range(0..crossings.len())];
            let speed = rng.gen_range(0.8..1.8);
            let turn = rng.gen_range(len * 3 / 10..=len * 7 / 10);
            let y0 = side * (LANE_WIDTH + SIDEWALK_WIDTH / 2.0);
            let x0 = cx - dir * speed * turn as f64 * DT;
            (
                AgentType::Pedestrian,
                Box::new(move |t| {
                    if t <= turn {
                        [x0 + dir * speed * t as f64 * DT, y0]
                    } else {
                        [cx, y0 - side * speed * (t - turn) as f64 * DT]
                    }
                }),
            )
        }
        Behavior::Vehicle => {
            let forward = rng.gen::<bool>();
            let speed = rng.gen_range(0.0..15.0);
            let (y0, dir) = if forward {
                (-LANE_WIDTH / 2.0, 1.0)
            } else {
                (LANE_WIDTH / 2.0, -1.0)
            };
            let x0 = -dir * rng.gen_range(0.0..ROAD_HALF_LENGTH);
            (
                AgentType::Vehicle,
                Box::new(move |t| [x0 + dir * speed * t as f64 * DT, y0]),
            )
        }
    }
}

/// Start position and velocity of a free-walking pedestrian.
fn random_walker(rng: &mut ChaCha8Rng) -> (f64, f64, f64, f64) {
    let x0 = rng.gen_range(-25.0..25.0);
    let y0 = rng.gen_range(-9.0..9.0);
    let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speed = rng.gen_range(0.3..2.2);
    (x0, y0, speed * heading.cos(), speed * heading.sin())
}

fn subdivide(a: [f64; 2], b: [f64; 2], step: f64) -> Vec<[f64; 2]> {
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let n = (len / step).ceil().max(1.0) as usize;
    (0..n)
        .map(|i| {
            let f = i as f64 / n as f64;
            [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
        })
        .collect()
}

/// Closed rectangle outline with long edges subdivided.
fn rectangle(x0: f64, x1: f64, y0: f64, y1: f64, step: f64) -> Vec<[f64; 2]> {
    let corners = [[x0, y0], [x1, y0], [x1, y1], [x0, y1]];
    let mut pts = Vec::new();
    for i in 0..4 {
        pts.extend(subdivide(corners[i], corners[(i + 1) % 4], step));
    }
    pts.push([x0, y0]);
    pts
}

fn build_map(crossings: &[f64]) -> Vec<MapPolygon> {
    let mut polys = Vec::new();
    let mut next_id = 1;
    let mut push = |ptype, points| {
        polys.push(MapPolygon {
            id: next_id,
            ptype,
            points,
        });
        next_id += 1;
    };
    let h = ROAD_HALF_LENGTH;
    push(
        PolygonType::DrivableArea,
        rectangle(-h, h, -LANE_WIDTH, LANE_WIDTH, EDGE_STEP),
    );
    for (y0, y1) in [(-LANE_WIDTH, 0.0), (0.0, LANE_WIDTH)] {
        let mut x = -h;
        while x < h - 1e-9 {
            push(
                PolygonType::LaneSegment,
                rectangle(x, x + LANE_SECTION, y0, y1, EDGE_STEP),
            );
            x += LANE_SECTION;
        }
    }
    for side in [1.0, -1.0] {
        let (a, b) = (side * LANE_WIDTH, side * (LANE_WIDTH + SIDEWALK_WIDTH));
        push(
            PolygonType::FreeSpace,
            rectangle(-h, h, a.min(b), a.max(b), EDGE_STEP),
        );
    }
    for &cx in crossings {
        let w = CROSSWALK_WIDTH / 2.0;
        push(
            PolygonType::Crosswalk,
            rectangle(cx - w, cx + w, -LANE_WIDTH, LANE_WIDTH, EDGE_STEP),
        );
    }
    polys
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, agents: usize) -> GeneratorConfig {
        GeneratorConfig {
            num_scenarios: n,
            agents_per_scenario: agents,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_synthetic(&cfg(1, 3), 7).unwrap();
        let b = generate_synthetic(&cfg(1, 3), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg(1, 3), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn constant_velocity_steps_are_equal() {
        let all = generate_synthetic(&cfg(20, 8), 3).unwrap();
        let mut checked = 0;
        for sc in &all {
            for tr in sc
                .tracks
                .iter()
                .filter(|t| Behavior::from_track_id(&t.id) == Some(Behavior::ConstantVelocity))
            {
                let d0 = [
                    tr.states[1].x - tr.states[0].x,
                    tr.states[1].y - tr.states[0].y,
                ];
                for w in tr.states.windows(2) {
                    let d = [w[1].x - w[0].x, w[1].y - w[0].y];
                    assert!((d[0] - d0[0]).abs() < 1e-9 && (d[1] - d0[1]).abs() < 1e-9);
                }
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn hundred_scenarios_with_full_tracks() {
        let all = generate_synthetic(&cfg(100, 8), 1).unwrap();
        assert_eq!(all.len(), 100);
        let mut full = 0;
        for sc in &all {
            sc.validate().unwrap();
            assert_eq!(sc.tracks.len(), 8);
            for tr in &sc.tracks {
                if tr.states[0].t == 0 && tr.states.last().unwrap().t == 109 {
                    assert_eq!(tr.states.len(), 110);
                    full += 1;
                }
            }
        }
        assert!(full > 500);
    }

    #[test]
    fn pedestrian_steps_bounded() {
        let all = generate_synthetic(&cfg(50, 8), 11).unwrap();
        for sc in &all {
            for tr in sc
                .tracks
                .iter()
                .filter(|t| t.agent_type == AgentType::Pedestrian)
            {
                for w in tr.states.windows(2) {
                    let d = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
                    assert!(d <= 0.25 + 1e-12, "{} step {d}", tr.id);
                }
            }
        }
    }

    #[test]
    fn map_has_crosswalks_and_unique_ids() {
        let sc = &generate_synthetic(&cfg(5, 1), 0).unwrap()[0];
        let n_cw = sc
            .map
            .iter()
            .filter(|p| p.ptype == PolygonType::Crosswalk)
            .count();
        assert!((1..=3).contains(&n_cw));
        super::super::validate_map(&sc.map, "t").unwrap();
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate_synthetic(&cfg(1, 0), 0).is_err());
        let mut c = cfg(1, 1);
        c.length = 0;
        assert!(generate_synthetic(&c, 0).is_err());
    }

    #[test]
    fn behavior_round_trips_through_id() {
        for b in [
            Behavior::ConstantVelocity,
            Behavior::StopAndWait,
            Behavior::CrosswalkTurn,
            Behavior::Vehicle,
        ] {
            assert_eq!(Behavior::from_track_id(&format!("{}-12", b.tag())), Some(b));
        }
        assert_eq!(Behavior::from_track_id("foo"), None);
    }
}
