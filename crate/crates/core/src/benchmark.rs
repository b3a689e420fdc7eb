//! Sliding-window sample construction, track relabeling and split assignment.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scene::io::Fields;
use crate::scene::{
    self, AgentType, Map, MapPolygon, Scenario, Track, TrackLabel, TrackState, FREQ_HZ,
};

/// Observed timesteps per sample (local t = 0..=9).
pub const OBS_STEPS: usize = 10;
/// Predicted timesteps per sample (local t = 10..=69).
pub const PRED_STEPS: usize = 60;
pub const WINDOW: usize = OBS_STEPS + PRED_STEPS;
pub const STRIDE: usize = 5;
/// Local index of the most recent observation.
pub const CURRENT_T: i64 = OBS_STEPS as i64 - 1;
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// One fixed-length window cut from a scenario, with sample-local timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub window_start: i64,
    pub tracks: Vec<Track>,
    pub map: Map,
}

impl Sample {
    /// Id of the scenario this window was cut from.
    pub fn scenario_id(&self) -> &str {
        self.id.rsplit_once('_').map(|(s, _)| s).unwrap_or(&self.id)
    }

    pub fn track(&self, id: &str) -> Option<&Track> {
        self.tracks.iter().find(|t| t.id == id)
    }

    pub fn scored(&self) -> impl Iterator<Item = &Track> {
        self.tracks
            .iter()
            .filter(|t| t.label == Some(TrackLabel::Scored))
    }

    /// Copy rotated by `rotation` radians about the scene origin, then
    /// translated by `translation`. Tracks and map move together.
    pub fn transformed(&self, rotation: f64, translation: [f64; 2]) -> Sample {
        let (c, s) = (rotation.cos(), rotation.sin());
        let f = |p: [f64; 2]| {
            [
                c * p[0] - s * p[1] + translation[0],
                s * p[0] + c * p[1] + translation[1],
            ]
        };
        let mut out = self.clone();
        for st in out.tracks.iter_mut().flat_map(|t| t.states.iter_mut()) {
            [st.x, st.y] = f(st.pos());
        }
        out.map = self
            .map
            .iter()
            .map(|p| MapPolygon {
                points: p.points.iter().map(|&q| f(q)).collect(),
                ..p.clone()
            })
            .collect();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

/// Assigns labels in place of any existing ones.
///
/// SCORED: pedestrian observed at every local step of the window.
/// UNSCORED: present at the current step but not SCORED.
/// FRAGMENT: everything else.
pub fn label_tracks(sample: Sample) -> Sample {
    label_with_horizon(sample, WINDOW as i64 - 1)
}

fn label_with_horizon(mut sample: Sample, last: i64) -> Sample {
    for tr in &mut sample.tracks {
        tr.label = Some(label_for(tr, last));
    }
    sample
}

fn label_for(track: &Track, last: i64) -> TrackLabel {
    let history = track.covers(0, CURRENT_T);
    let future = track.covers(CURRENT_T + 1, last);
    if track.agent_type == AgentType::Pedestrian && history && future {
        TrackLabel::Scored
    } else if track.state_at(CURRENT_T).is_some() {
        TrackLabel::Unscored
    } else {
        TrackLabel::Fragment
    }
}

/// Cuts `scenario` into windows starting at `0, stride, 2*stride, ...`.
/// Windows without a SCORED pedestrian are dropped.
pub fn slide_windows(scenario: &Scenario, window: usize, stride: usize) -> Result<Vec<Sample>> {
    if window == 0 || stride == 0 {
        return Err(Error::validation("window and stride must be positive"));
    }
    if window <= OBS_STEPS {
        return Err(Error::validation(format!(
            "window {window} leaves no prediction steps after {OBS_STEPS} observations"
        )));
    }
    let len = scenario.length();
    let window = window as i64;
    let mut out = Vec::new();
    let mut start = 0i64;
    while start + window <= len {
        let end = start + window - 1;
        let tracks = clip_tracks(scenario, start, end);
        let sample = label_with_horizon(
            Sample {
                id: format!("{}_{start}", scenario.id),
                window_start: start,
                tracks,
                map: scenario.map.clone(),
            },
            window - 1,
        );
        if sample.scored().next().is_some() {
            out.push(sample);
        }
        start += stride as i64;
    }
    Ok(out)
}

fn clip_tracks(scenario: &Scenario, start: i64, end: i64) -> Vec<Track> {
    scenario
        .tracks
        .iter()
        .filter_map(|tr| {
            let states: Vec<TrackState> = tr
                .states
                .iter()
                .filter(|s| s.t >= start && s.t <= end)
                .map(|s| TrackState::new(s.t - start, s.x, s.y))
                .collect();
            (!states.is_empty()).then(|| Track {
                id: tr.id.clone(),
                agent_type: tr.agent_type,
                states,
                label: None,
            })
        })
        .collect()
}

/// Window of `scenario` starting at `start` for inference on `focal_id`.
/// The future may be missing; the focal pedestrian only needs all 10
/// observed steps and is labeled SCORED.
pub fn observation_window(scenario: &Scenario, start: i64, focal_id: &str) -> Result<Sample> {
    if start < 0 {
        return Err(Error::validation(format!(
            "window start {start} is negative"
        )));
    }
    let end = start + WINDOW as i64 - 1;
    let mut sample = label_tracks(Sample {
        id: format!("{}_{start}", scenario.id),
        window_start: start,
        tracks: clip_tracks(scenario, start, end),
        map: scenario.map.clone(),
    });
    let focal = sample
        .tracks
        .iter_mut()
        .find(|t| t.id == focal_id)
        .ok_or_else(|| {
            Error::Lookup(format!(
                "focal `{focal_id}` not in scenario `{}`",
                scenario.id
            ))
        })?;
    if focal.agent_type != AgentType::Pedestrian || !focal.covers(0, CURRENT_T) {
        return Err(Error::Lookup(format!(
            "focal `{focal_id}` is not a pedestrian observed over steps {start}..={}",
            start + CURRENT_T
        )));
    }
    focal.label = Some(TrackLabel::Scored);
    Ok(sample)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Deterministic split from the FNV-1a hash of the scenario id mapped to [0, 1).
pub fn assign_split(scenario_id: &str, ratios: (f64, f64, f64)) -> Result<Split> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(*r >= 0.0)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    if scenario_id.is_empty() {
        return Err(Error::validation("scenario id must be non-empty"));
    }
    let u = (fnv1a64(scenario_id.as_bytes()) >> 11) as f64 / (1u64 << 53) as f64;
    Ok(if u < tr {
        Split::Train
    } else if u < tr + va {
        Split::Val
    } else {
        Split::Test
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub window: usize,
    pub stride: usize,
    pub ratios: (f64, f64, f64),
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            window: WINDOW,
            stride: STRIDE,
            ratios: DEFAULT_RATIOS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub scenarios: usize,
    pub samples: usize,
    pub scored_tracks: usize,
    pub multi_pedestrian_samples: usize,
    pub multi_pedestrian_fraction: f64,
    /// Pairs of samples from one scenario whose windows overlap in time.
    pub overlapping_window_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub splits: BTreeMap<String, SplitCounts>,
    pub stride: usize,
    pub window: usize,
    pub ratios: (f64, f64, f64),
    pub split_by: String,
    pub hash: String,
}

impl BenchmarkManifest {
    pub fn counts(&self, split: Split) -> &SplitCounts {
        &self.splits[split.name()]
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            field: "manifest".into(),
            msg: e.to_string(),
        })
    }
}

/// Windows every scenario, writes `{train,val,test}.jsonl` plus `manifest.json`.
pub fn build_benchmark(
    scenarios: &[Scenario],
    out_dir: impl AsRef<Path>,
    config: &BenchmarkConfig,
) -> Result<BenchmarkManifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut writers = BTreeMap::new();
    for split in Split::ALL {
        let path = out_dir.join(split.file_name());
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writers.insert(split, (path, BufWriter::new(f)));
    }
    let mut counts: BTreeMap<Split, SplitCounts> = Split::ALL
        .into_iter()
        .map(|s| (s, SplitCounts::default()))
        .collect();

    for sc in scenarios {
        sc.validate()?;
        let split = assign_split(&sc.id, config.ratios)?;
        let samples = slide_windows(sc, config.window, config.stride)?;
        let c = counts.get_mut(&split).unwrap();
        c.scenarios += 1;
        c.samples += samples.len();
        for (i, s) in samples.iter().enumerate() {
            let scored = s.scored().count();
            c.scored_tracks += scored;
            if scored > 1 {
                c.multi_pedestrian_samples += 1;
            }
            c.overlapping_window_pairs += samples[i + 1..]
                .iter()
                .filter(|o| o.window_start - s.window_start < config.window as i64)
                .count();
        }
        let (path, w) = writers.get_mut(&split).unwrap();
        for s in &samples {
            write_sample(w, s).map_err(|e| Error::io(path.as_path(), e))?;
        }
    }
    for (path, mut w) in writers.into_values() {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    for c in counts.values_mut() {
        c.multi_pedestrian_fraction = if c.samples == 0 {
            0.0
        } else {
            c.multi_pedestrian_samples as f64 / c.samples as f64
        };
    }
    let manifest = BenchmarkManifest {
        splits: counts
            .into_iter()
            .map(|(s, c)| (s.name().to_string(), c))
            .collect(),
        stride: config.stride,
        window: config.window,
        ratios: config.ratios,
        split_by: "scenario_id".into(),
        hash: "fnv1a64".into(),
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    id: &'a str,
    window_start: i64,
    freq_hz: u32,
    tracks: Vec<scene::TrackRecord<'a>>,
    map: Vec<scene::PolygonRecord<'a>>,
}

fn write_sample(w: &mut impl Write, s: &Sample) -> std::io::Result<()> {
    let rec = SampleRecord {
        id: &s.id,
        window_start: s.window_start,
        freq_hz: FREQ_HZ,
        tracks: s.tracks.iter().map(scene::write_track).collect(),
        map: scene::write_map(&s.map),
    };
    serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::other)?;
    w.write_all(b"\n")
}

pub fn save_samples(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        write_sample(&mut w, s).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_sample(&line, i + 1)?);
    }
    Ok(out)
}

/// Loads one split of a benchmark directory.
pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Vec<Sample>> {
    load_samples(dir.as_ref().join(split.file_name()))
}

fn parse_sample(text: &str, line: usize) -> Result<Sample> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        field: "<record>".into(),
        msg: e.to_string(),
    })?;
    let obj = Fields::object(&value, line, "<record>")?;
    if obj.int("freq_hz")? != FREQ_HZ as i64 {
        return Err(obj.err("freq_hz", "must be 10"));
    }
    let tracks = obj
        .array("tracks")?
        .iter()
        .enumerate()
        .map(|(k, v)| scene::parse_track(v, line, &format!("tracks[{k}]"), true))
        .collect::<Result<Vec<_>>>()?;
    for tr in &tracks {
        tr.validate()?;
        if tr.states[0].t < 0 || tr.states.last().unwrap().t >= WINDOW as i64 {
            return Err(obj.err("tracks", "local timestep outside [0, 69]"));
        }
    }
    let map = scene::parse_map(obj.get("map")?, line, "map")?;
    scene::validate_map(&map, "sample")?;
    Ok(Sample {
        id: obj.string("id")?,
        window_start: obj.int("window_start")?,
        tracks,
        map: Arc::from(map),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic, GeneratorConfig};
    use proptest::prelude::*;

    fn straight(id: &str, ty: AgentType, ts: std::ops::RangeInclusive<i64>) -> Track {
        Track::new(
            id,
            ty,
            ts.map(|t| TrackState::new(t, 0.1 * t as f64, 0.0))
                .collect(),
        )
    }

    fn scenario(tracks: Vec<Track>) -> Scenario {
        Scenario {
            id: "sc".into(),
            freq_hz: 10,
            tracks,
            map: Arc::from(Vec::new()),
        }
    }

    #[test]
    fn nine_windows_for_full_pedestrian() {
        let sc = scenario(vec![straight("p", AgentType::Pedestrian, 0..=109)]);
        let w = slide_windows(&sc, 70, 5).unwrap();
        assert_eq!(w.len(), 9);
        assert_eq!(
            w.iter().map(|s| s.window_start).collect::<Vec<_>>(),
            (0..=40).step_by(5).collect::<Vec<_>>()
        );
        assert_eq!(w[3].tracks[0].states[0].t, 0);
        assert_eq!(w[3].tracks[0].states[0].x, 1.5);
    }

    #[test]
    fn too_short_scenario_is_empty() {
        let sc = scenario(vec![straight("p", AgentType::Pedestrian, 0..=68)]);
        assert!(slide_windows(&sc, 70, 5).unwrap().is_empty());
    }

    #[test]
    fn early_ending_pedestrian_yields_nothing() {
        let sc = scenario(vec![
            straight("p", AgentType::Pedestrian, 0..=50),
            straight("v", AgentType::Vehicle, 0..=109),
        ]);
        assert!(slide_windows(&sc, 70, 5).unwrap().is_empty());
    }

    #[test]
    fn observation_window_needs_only_history() {
        let sc = scenario(vec![
            straight("p", AgentType::Pedestrian, 0..=40),
            straight("q", AgentType::Pedestrian, 35..=109),
            straight("v", AgentType::Vehicle, 0..=109),
        ]);
        let w = observation_window(&sc, 25, "p").unwrap();
        assert_eq!(w.track("p").unwrap().label, Some(TrackLabel::Scored));
        assert_eq!(w.track("p").unwrap().states.len(), 16);
        assert_eq!(w.track("q").unwrap().label, Some(TrackLabel::Fragment));
        assert_eq!(w.track("v").unwrap().states[0].x, 2.5);
        assert!(matches!(
            observation_window(&sc, 35, "p"),
            Err(Error::Lookup(_))
        ));
        assert!(matches!(
            observation_window(&sc, 0, "v"),
            Err(Error::Lookup(_))
        ));
        assert!(matches!(
            observation_window(&sc, 0, "zz"),
            Err(Error::Lookup(_))
        ));
        assert!(observation_window(&sc, -1, "p").is_err());
    }

    #[test]
    fn bad_stride_rejected() {
        let sc = scenario(vec![]);
        assert!(slide_windows(&sc, 70, 0).is_err());
        assert!(slide_windows(&sc, 0, 5).is_err());
    }

    #[test]
    fn labels_follow_window_coverage() {
        let sample = Sample {
            id: "x_0".into(),
            window_start: 0,
            tracks: vec![
                straight("ped1", AgentType::Pedestrian, 0..=69),
                straight("ped2", AgentType::Pedestrian, 3..=40),
                straight("veh1", AgentType::Vehicle, 20..=69),
                straight("veh2", AgentType::Vehicle, 0..=69),
                straight("ped3", AgentType::Pedestrian, 0..=8),
            ],
            map: Arc::from(Vec::new()),
        };
        let s = label_tracks(sample);
        let labels: Vec<_> = s.tracks.iter().map(|t| t.label.unwrap()).collect();
        assert_eq!(
            labels,
            [
                TrackLabel::Scored,
                TrackLabel::Unscored,
                TrackLabel::Fragment,
                TrackLabel::Unscored,
                TrackLabel::Fragment
            ]
        );
        assert_eq!(label_tracks(s.clone()), s);
    }

    #[test]
    fn split_is_deterministic_and_balanced() {
        assert_eq!(
            assign_split("abc", DEFAULT_RATIOS).unwrap(),
            assign_split("abc", DEFAULT_RATIOS).unwrap()
        );
        use rand::{distributions::Alphanumeric, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let train = (0..n)
            .filter(|_| {
                let id: String = (&mut rng)
                    .sample_iter(&Alphanumeric)
                    .take(16)
                    .map(char::from)
                    .collect();
                assign_split(&id, DEFAULT_RATIOS).unwrap() == Split::Train
            })
            .count();
        let frac = train as f64 / n as f64;
        assert!((frac - 0.8).abs() < 0.02, "{frac}");
        for i in 0..100 {
            assert_eq!(
                assign_split(&i.to_string(), (1.0, 0.0, 0.0)).unwrap(),
                Split::Train
            );
        }
        assert!(assign_split("a", (0.5, 0.5, 0.5)).is_err());
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn manifest_counts_match_recount() {
        let scenarios = generate_synthetic(
            &GeneratorConfig {
                num_scenarios: 100,
                agents_per_scenario: 6,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = build_benchmark(&scenarios, dir.path(), &BenchmarkConfig::default()).unwrap();
        let mut expected = BTreeMap::new();
        for sc in &scenarios {
            let split = assign_split(&sc.id, DEFAULT_RATIOS).unwrap();
            *expected.entry(split).or_insert(0) += slide_windows(sc, 70, 5).unwrap().len();
        }
        let mut seen_ids: BTreeMap<String, Split> = BTreeMap::new();
        for split in Split::ALL {
            let loaded = load_split(dir.path(), split).unwrap();
            assert_eq!(loaded.len(), m.counts(split).samples);
            assert_eq!(loaded.len(), expected.get(&split).copied().unwrap_or(0));
            let scored: usize = loaded.iter().map(|s| s.scored().count()).sum();
            assert_eq!(scored, m.counts(split).scored_tracks);
            for s in &loaded {
                assert_eq!(label_tracks(s.clone()), *s);
                let prev = seen_ids.insert(s.scenario_id().to_string(), split);
                assert!(prev.is_none() || prev == Some(split), "leak across splits");
            }
        }
        assert_eq!(BenchmarkManifest::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn empty_input_gives_zero_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_benchmark(&[], dir.path(), &BenchmarkConfig::default()).unwrap();
        for split in Split::ALL {
            assert_eq!(*m.counts(split), SplitCounts::default());
        }
    }

    fn brute_force_count(len: i64, window: i64, stride: i64) -> usize {
        (0..len)
            .filter(|s| s % stride == 0 && s + window <= len)
            .count()
    }

    proptest! {
        #[test]
        fn window_count_formula(len in 70i64..=300, stride in 1usize..=20) {
            let sc = scenario(vec![straight("p", AgentType::Pedestrian, 0..=len - 1)]);
            let got = slide_windows(&sc, 70, stride).unwrap().len();
            prop_assert_eq!(got, brute_force_count(len, 70, stride as i64));
            prop_assert_eq!(got as i64, (len - 70) / stride as i64 + 1);
        }
    }
}
