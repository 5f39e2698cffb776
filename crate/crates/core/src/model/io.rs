//! Trajectory interchange (JSONL / CSV) and lane-map JSON.

use super::{Frame, Lane, LaneBand, LaneMap, ModelError, Trajectory, TrajectorySet, VehicleKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryFormat {
    Jsonl,
    Csv,
}

impl TrajectoryFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => TrajectoryFormat::Csv,
            _ => TrajectoryFormat::Jsonl,
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: vehicle {vehicle_id} has a second row at t = {t}")]
    DuplicateTimestamp {
        line: usize,
        vehicle_id: String,
        t: f64,
    },
    #[error("line {line}: vehicle {vehicle_id} changes {field} between rows")]
    InconsistentVehicle {
        line: usize,
        vehicle_id: String,
        field: &'static str,
    },
    #[error("no trajectory rows found")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Row {
    vehicle_id: String,
    kind: VehicleKind,
    t: f64,
    x: f64,
    y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heading: Option<f64>,
    length: f64,
    width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lane_id: Option<String>,
}

/// CSV rows always carry every column so the header is stable.
#[derive(Serialize)]
struct CsvRow<'a> {
    vehicle_id: &'a str,
    kind: VehicleKind,
    t: f64,
    x: f64,
    y: f64,
    v: Option<f64>,
    heading: Option<f64>,
    length: f64,
    width: f64,
    lane_id: Option<&'a str>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LoadError + '_ {
    move |source| LoadError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_trajectories(path: &Path, format: TrajectoryFormat) -> Result<TrajectorySet, LoadError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let tag = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    parse_trajectories(&text, format, tag)
}

/// Parses interchange text. Line numbers in errors are 1-based and count
/// the CSV header.
pub fn parse_trajectories(
    text: &str,
    format: TrajectoryFormat,
    source_tag: impl Into<String>,
) -> Result<TrajectorySet, LoadError> {
    let rows = match format {
        TrajectoryFormat::Jsonl => parse_jsonl(text)?,
        TrajectoryFormat::Csv => parse_csv(text)?,
    };
    if rows.is_empty() {
        return Err(LoadError::Empty);
    }
    group_rows(rows, source_tag.into())
}

fn parse_jsonl(text: &str) -> Result<Vec<(usize, Row)>, LoadError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Row>(l)
                .map(|r| (i + 1, r))
                .map_err(|e| LoadError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

fn parse_csv(text: &str) -> Result<Vec<(usize, Row)>, LoadError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for result in reader.deserialize::<Row>() {
        match result {
            Ok(row) => {
                let line = out.len() + 2;
                out.push((line, row));
            }
            Err(e) => {
                let line = e
                    .position()
                    .map(|p| p.line() as usize)
                    .unwrap_or(out.len() + 2);
                return Err(LoadError::Parse {
                    line,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

fn group_rows(rows: Vec<(usize, Row)>, source_tag: String) -> Result<TrajectorySet, LoadError> {
    let mut groups: BTreeMap<String, (VehicleKind, f64, f64, Vec<Frame>)> = BTreeMap::new();
    for (line, row) in rows {
        if ![row.t, row.x, row.y].iter().all(|v| v.is_finite()) {
            return Err(LoadError::Parse {
                line,
                message: "non-finite t, x or y".into(),
            });
        }
        let entry = groups
            .entry(row.vehicle_id.clone())
            .or_insert_with(|| (row.kind, row.length, row.width, Vec::new()));
        let field = if entry.0 != row.kind {
            Some("kind")
        } else if entry.1 != row.length {
            Some("length")
        } else if entry.2 != row.width {
            Some("width")
        } else {
            None
        };
        if let Some(field) = field {
            return Err(LoadError::InconsistentVehicle {
                line,
                vehicle_id: row.vehicle_id,
                field,
            });
        }
        if let Some(prev) = entry.3.last() {
            if row.t == prev.t {
                return Err(LoadError::DuplicateTimestamp {
                    line,
                    vehicle_id: row.vehicle_id,
                    t: row.t,
                });
            }
            if row.t < prev.t {
                return Err(LoadError::Parse {
                    line,
                    message: format!(
                        "time goes backwards for vehicle {} ({} after {})",
                        row.vehicle_id, row.t, prev.t
                    ),
                });
            }
        }
        entry.3.push(Frame {
            t: row.t,
            x: row.x,
            y: row.y,
            v: row.v,
            heading: row.heading,
            lane_id: row.lane_id,
        });
    }
    let mut set = TrajectorySet::new(source_tag);
    for (id, (kind, length, width, frames)) in groups {
        set.insert(Trajectory::new(id, kind, length, width, frames)?)?;
    }
    Ok(set)
}

/// Serializes a set, vehicles in id order and frames in time order.
pub fn write_trajectories_to<W: Write>(
    set: &TrajectorySet,
    format: TrajectoryFormat,
    mut out: W,
) -> std::io::Result<()> {
    match format {
        TrajectoryFormat::Jsonl => {
            for traj in set.iter() {
                for f in &traj.frames {
                    let row = Row {
                        vehicle_id: traj.vehicle_id.clone(),
                        kind: traj.kind,
                        t: f.t,
                        x: f.x,
                        y: f.y,
                        v: f.v,
                        heading: f.heading,
                        length: traj.length,
                        width: traj.width,
                        lane_id: f.lane_id.clone(),
                    };
                    serde_json::to_writer(&mut out, &row)?;
                    out.write_all(b"\n")?;
                }
            }
        }
        TrajectoryFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for traj in set.iter() {
                for f in &traj.frames {
                    w.serialize(CsvRow {
                        vehicle_id: &traj.vehicle_id,
                        kind: traj.kind,
                        t: f.t,
                        x: f.x,
                        y: f.y,
                        v: f.v,
                        heading: f.heading,
                        length: traj.length,
                        width: traj.width,
                        lane_id: f.lane_id.as_deref(),
                    })
                    .map_err(std::io::Error::other)?;
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn write_trajectories(
    set: &TrajectorySet,
    path: &Path,
    format: TrajectoryFormat,
) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    write_trajectories_to(set, format, &mut buf)?;
    buf.flush()
}

#[derive(Deserialize)]
struct LaneMapFile {
    #[serde(default)]
    lanes: Vec<Lane>,
    #[serde(default)]
    bands: Vec<LaneBand>,
}

pub fn parse_lane_map(text: &str) -> Result<LaneMap, LoadError> {
    let file: LaneMapFile = serde_json::from_str(text).map_err(|e| LoadError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut lanes = file.lanes;
    lanes.extend(file.bands.into_iter().map(Lane::from));
    Ok(LaneMap::new(lanes)?)
}

pub fn load_lane_map(path: &Path) -> Result<LaneMap, LoadError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_lane_map(&text)
}

impl<'de> Deserialize<'de> for LaneMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let file = LaneMapFile::deserialize(d)?;
        let mut lanes = file.lanes;
        lanes.extend(file.bands.into_iter().map(Lane::from));
        LaneMap::new(lanes).map_err(serde::de::Error::custom)
    }
}
