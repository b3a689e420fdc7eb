//! JSON-lines scenario files. Field order on write is fixed so that golden
//! files stay byte-stable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use serde_json::{Map as JsonMap, Value};

use super::{AgentType, MapPolygon, PolygonType, Scenario, Track, TrackLabel, TrackState};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct StateRecord {
    t: i64,
    x: f64,
    y: f64,
}

/// Wire form of a track; `label` is only emitted inside samples.
#[derive(Serialize)]
pub struct TrackRecord<'a> {
    id: &'a str,
    #[serde(rename = "type")]
    agent_type: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    states: Vec<StateRecord>,
}

#[derive(Serialize)]
pub struct PolygonRecord<'a> {
    id: i64,
    #[serde(rename = "type")]
    ptype: u8,
    points: &'a [[f64; 2]],
}

#[derive(Serialize)]
struct ScenarioRecord<'a> {
    id: &'a str,
    freq_hz: u32,
    tracks: Vec<TrackRecord<'a>>,
    map: Vec<PolygonRecord<'a>>,
}

pub fn write_track(track: &Track) -> TrackRecord<'_> {
    TrackRecord {
        id: &track.id,
        agent_type: track.agent_type.code(),
        label: track.label.map(TrackLabel::code),
        states: track
            .states
            .iter()
            .map(|s| StateRecord {
                t: s.t,
                x: s.x,
                y: s.y,
            })
            .collect(),
    }
}

pub fn write_map(map: &[MapPolygon]) -> Vec<PolygonRecord<'_>> {
    map.iter()
        .map(|p| PolygonRecord {
            id: p.id,
            ptype: p.ptype.code(),
            points: &p.points,
        })
        .collect()
}

pub fn save_scenarios(scenarios: &[Scenario], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for sc in scenarios {
        let rec = ScenarioRecord {
            id: &sc.id,
            freq_hz: sc.freq_hz,
            tracks: sc.tracks.iter().map(write_track).collect(),
            map: write_map(&sc.map),
        };
        serde_json::to_writer(&mut out, &rec)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_scenarios(path: impl AsRef<Path>) -> Result<Vec<Scenario>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sc = parse_scenario(&line, i + 1)?;
        sc.validate()?;
        out.push(sc);
    }
    Ok(out)
}

fn parse_scenario(text: &str, line: usize) -> Result<Scenario> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        field: "<record>".into(),
        msg: e.to_string(),
    })?;
    let obj = Fields::object(&value, line, "<record>")?;
    let freq = obj.int("freq_hz")?;
    let freq_hz = u32::try_from(freq).map_err(|_| obj.err("freq_hz", "out of range"))?;
    let tracks = obj
        .array("tracks")?
        .iter()
        .enumerate()
        .map(|(k, v)| parse_track(v, line, &format!("tracks[{k}]"), false))
        .collect::<Result<Vec<_>>>()?;
    let map = parse_map(obj.get("map")?, line, "map")?;
    Ok(Scenario {
        id: obj.string("id")?,
        freq_hz,
        tracks,
        map: Arc::from(map),
    })
}

/// Parses one track object. `with_label` requires the sample-only `label` key.
pub fn parse_track(value: &Value, line: usize, path: &str, with_label: bool) -> Result<Track> {
    let obj = Fields::object(value, line, path)?;
    let code = obj.int("type")?;
    let agent_type =
        AgentType::from_code(code).ok_or_else(|| obj.err("type", "unknown agent type"))?;
    let label = if with_label {
        let code = obj.int("label")?;
        Some(TrackLabel::from_code(code).ok_or_else(|| obj.err("label", "unknown label"))?)
    } else {
        if obj.0.contains_key("label") {
            return Err(obj.err("label", "labels are only allowed inside samples"));
        }
        None
    };
    let states = obj
        .array("states")?
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let s = Fields::object(v, line, &format!("{path}.states[{k}]"))?;
            Ok(TrackState {
                t: s.int("t")?,
                x: s.float("x")?,
                y: s.float("y")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Track {
        id: obj.string("id")?,
        agent_type,
        states,
        label,
    })
}

pub fn parse_map(value: &Value, line: usize, path: &str) -> Result<Vec<MapPolygon>> {
    let items = value.as_array().ok_or_else(|| Error::Parse {
        line,
        field: path.into(),
        msg: "expected array".into(),
    })?;
    items
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let here = format!("{path}[{k}]");
            let obj = Fields::object(v, line, &here)?;
            let code = obj.int("type")?;
            let ptype = PolygonType::from_code(code)
                .ok_or_else(|| obj.err("type", "unknown polygon type"))?;
            let points = obj
                .array("points")?
                .iter()
                .map(|p| match p.as_array().map(|a| a.as_slice()) {
                    Some([x, y]) => match (x.as_f64(), y.as_f64()) {
                        (Some(x), Some(y)) => Ok([x, y]),
                        _ => Err(obj.err("points", "expected numeric [x, y]")),
                    },
                    _ => Err(obj.err("points", "expected [x, y] pair")),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MapPolygon {
                id: obj.int("id")?,
                ptype,
                points,
            })
        })
        .collect()
}

/// Typed field access that reports the line and dotted field path on failure.
pub(crate) struct Fields<'v>(pub &'v JsonMap<String, Value>, usize, String);

impl<'v> Fields<'v> {
    pub(crate) fn object(value: &'v Value, line: usize, path: &str) -> Result<Self> {
        match value.as_object() {
            Some(m) => Ok(Fields(m, line, path.to_string())),
            None => Err(Error::Parse {
                line,
                field: path.into(),
                msg: "expected object".into(),
            }),
        }
    }

    pub(crate) fn err(&self, name: &str, msg: &str) -> Error {
        let field = if self.2 == "<record>" {
            name.to_string()
        } else {
            format!("{}.{name}", self.2)
        };
        Error::Parse {
            line: self.1,
            field,
            msg: msg.into(),
        }
    }

    pub(crate) fn get(&self, name: &str) -> Result<&'v Value> {
        self.0.get(name).ok_or_else(|| self.err(name, "missing"))
    }

    pub(crate) fn int(&self, name: &str) -> Result<i64> {
        self.get(name)?
            .as_i64()
            .ok_or_else(|| self.err(name, "expected integer"))
    }

    pub(crate) fn float(&self, name: &str) -> Result<f64> {
        self.get(name)?
            .as_f64()
            .ok_or_else(|| self.err(name, "expected number"))
    }

    pub(crate) fn string(&self, name: &str) -> Result<String> {
        self.get(name)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.err(name, "expected string"))
    }

    pub(crate) fn array(&self, name: &str) -> Result<&'v Vec<Value>> {
        self.get(name)?
            .as_array()
            .ok_or_else(|| self.err(name, "expected array"))
    }
}
