//! Shared data model: trajectories, lane maps and trajectory sets.
//!
//! Everything here is immutable once built and is passed by reference to
//! the extraction, scoring and comparison stages.

mod geometry;
mod io;
mod kinematics;

pub use geometry::{project_onto_polyline, Projection};
pub use io::{
    load_lane_map, load_trajectories, parse_lane_map, parse_trajectories, write_trajectories,
    write_trajectories_to, TrajectoryFormat,
};
pub use kinematics::{accelerations, derive_kinematics, resample_uniform};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Sampling interval used throughout the pipeline, seconds.
pub const DEFAULT_DT: f64 = 0.1;

/// Tolerance used when comparing sample times against a tick grid.
pub(crate) const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("trajectory {0} has no frames")]
    NoFrames(String),
    #[error("trajectory {id} needs at least {needed} frames, has {have}")]
    TooShort { id: String, needed: usize, have: usize },
    #[error("trajectory {id}: vehicle dimensions must be positive (length {length}, width {width})")]
    BadDimensions { id: String, length: f64, width: f64 },
    #[error("trajectory {id}: time must be strictly increasing (frame {index}, t = {t})")]
    NonIncreasingTime { id: String, index: usize, t: f64 },
    #[error("sampling interval must be positive and finite, got {0}")]
    BadDt(f64),
    #[error("lane {0}: centerline needs at least 2 points")]
    ShortCenterline(String),
    #[error("lane {0} appears more than once")]
    DuplicateLane(String),
    #[error("lane {lane} references unknown lane {target}")]
    UnknownLane { lane: String, target: String },
    #[error("lane {lane}: {side} neighbor {neighbor} does not point back")]
    AsymmetricNeighbor {
        lane: String,
        side: &'static str,
        neighbor: String,
    },
    #[error("duplicate vehicle id {0}")]
    DuplicateVehicle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VehicleKind {
    #[serde(rename = "AV")]
    Av,
    #[serde(rename = "HV")]
    Hv,
}

impl std::fmt::Display for VehicleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VehicleKind::Av => "AV",
            VehicleKind::Hv => "HV",
        })
    }
}

/// One planar kinematic sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane_id: Option<String>,
}

impl Frame {
    pub fn new(t: f64, x: f64, y: f64) -> Self {
        Frame {
            t,
            x,
            y,
            v: None,
            heading: None,
            lane_id: None,
        }
    }

    pub fn with_kinematics(mut self, v: f64, heading: f64) -> Self {
        self.v = Some(v);
        self.heading = Some(heading);
        self
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub vehicle_id: String,
    pub kind: VehicleKind,
    pub length: f64,
    pub width: f64,
    pub frames: Vec<Frame>,
}

impl Trajectory {
    pub fn new(
        vehicle_id: impl Into<String>,
        kind: VehicleKind,
        length: f64,
        width: f64,
        frames: Vec<Frame>,
    ) -> Result<Self, ModelError> {
        let traj = Trajectory {
            vehicle_id: vehicle_id.into(),
            kind,
            length,
            width,
            frames,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.frames.is_empty() {
            return Err(ModelError::NoFrames(self.vehicle_id.clone()));
        }
        if !(self.length > 0.0 && self.width > 0.0) {
            return Err(ModelError::BadDimensions {
                id: self.vehicle_id.clone(),
                length: self.length,
                width: self.width,
            });
        }
        for (i, w) in self.frames.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(ModelError::NonIncreasingTime {
                    id: self.vehicle_id.clone(),
                    index: i + 1,
                    t: w[1].t,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn start_t(&self) -> f64 {
        self.frames[0].t
    }

    pub fn end_t(&self) -> f64 {
        self.frames[self.frames.len() - 1].t
    }

    /// True when every frame carries speed and heading.
    pub fn has_kinematics(&self) -> bool {
        self.frames
            .iter()
            .all(|f| f.v.is_some() && f.heading.is_some())
    }

    /// Speed at frame `i`, NaN when not available.
    pub fn speed(&self, i: usize) -> f64 {
        self.frames[i].v.unwrap_or(f64::NAN)
    }

    pub fn heading(&self, i: usize) -> f64 {
        self.frames[i].heading.unwrap_or(f64::NAN)
    }

    /// Returns the trajectory with speed and heading filled in, deriving
    /// them from positions when any frame lacks them.
    pub fn ensure_kinematics(&self) -> Result<Trajectory, ModelError> {
        if self.has_kinematics() {
            Ok(self.clone())
        } else {
            derive_kinematics(self)
        }
    }

    /// Integer tick of the first frame on a grid of spacing `dt`.
    pub fn first_tick(&self, dt: f64) -> i64 {
        tick_of(self.start_t(), dt)
    }

    /// Frame index whose time falls on tick `tick`, assuming the trajectory
    /// is uniformly sampled at `dt`.
    pub fn index_at_tick(&self, tick: i64, dt: f64) -> Option<usize> {
        let offset = tick - self.first_tick(dt);
        if offset < 0 || offset as usize >= self.frames.len() {
            return None;
        }
        let i = offset as usize;
        (tick_of(self.frames[i].t, dt) == tick).then_some(i)
    }

    /// Largest deviation of consecutive time steps from `dt`.
    pub fn max_dt_deviation(&self, dt: f64) -> f64 {
        self.frames
            .windows(2)
            .map(|w| ((w[1].t - w[0].t) - dt).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_uniform(&self, dt: f64) -> bool {
        self.max_dt_deviation(dt) <= 1e-6
    }
}

pub fn tick_of(t: f64, dt: f64) -> i64 {
    (t / dt).round() as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub lane_id: String,
    pub centerline: Vec<[f64; 2]>,
    #[serde(default)]
    pub left_neighbor: Option<String>,
    #[serde(default)]
    pub right_neighbor: Option<String>,
    #[serde(default)]
    pub successors: Vec<String>,
    #[serde(default)]
    pub is_interpolated: bool,
    #[serde(default)]
    pub stop_line: Option<[f64; 2]>,
    #[serde(default)]
    pub allows_turn: bool,
}

impl Lane {
    pub fn project(&self, p: [f64; 2]) -> Projection {
        project_onto_polyline(p, &self.centerline)
    }

    pub fn is_neighbor(&self, other: &str) -> bool {
        self.left_neighbor.as_deref() == Some(other)
            || self.right_neighbor.as_deref() == Some(other)
    }
}

/// Straight lane region given as a band of lateral offsets, for data sets
/// whose lanes were segmented by hand instead of coming with a map.
///
/// The band becomes a lane whose centerline runs along the band middle
/// from `x_min` to `x_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneBand {
    pub lane_id: String,
    pub y_min: f64,
    pub y_max: f64,
    pub x_min: f64,
    pub x_max: f64,
    #[serde(default)]
    pub left_neighbor: Option<String>,
    #[serde(default)]
    pub right_neighbor: Option<String>,
    #[serde(default)]
    pub successors: Vec<String>,
    #[serde(default)]
    pub stop_line_x: Option<f64>,
    #[serde(default)]
    pub allows_turn: bool,
}

impl From<LaneBand> for Lane {
    fn from(b: LaneBand) -> Lane {
        let mid = 0.5 * (b.y_min + b.y_max);
        Lane {
            lane_id: b.lane_id,
            centerline: vec![[b.x_min, mid], [b.x_max, mid]],
            left_neighbor: b.left_neighbor,
            right_neighbor: b.right_neighbor,
            successors: b.successors,
            is_interpolated: false,
            stop_line: b.stop_line_x.map(|x| [x, mid]),
            allows_turn: b.allows_turn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaneMap {
    lanes: Vec<Lane>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl LaneMap {
    pub fn new(lanes: Vec<Lane>) -> Result<Self, ModelError> {
        let mut index = BTreeMap::new();
        for (i, lane) in lanes.iter().enumerate() {
            if lane.centerline.len() < 2 {
                return Err(ModelError::ShortCenterline(lane.lane_id.clone()));
            }
            if index.insert(lane.lane_id.clone(), i).is_some() {
                return Err(ModelError::DuplicateLane(lane.lane_id.clone()));
            }
        }
        let map = LaneMap { lanes, index };
        map.check_references()?;
        Ok(map)
    }

    fn check_references(&self) -> Result<(), ModelError> {
        for lane in &self.lanes {
            let refs = lane
                .left_neighbor
                .iter()
                .chain(lane.right_neighbor.iter())
                .chain(lane.successors.iter());
            for target in refs {
                if !self.index.contains_key(target) {
                    return Err(ModelError::UnknownLane {
                        lane: lane.lane_id.clone(),
                        target: target.clone(),
                    });
                }
            }
            if let Some(r) = &lane.right_neighbor {
                if self.lane(r).and_then(|l| l.left_neighbor.as_deref()) != Some(&lane.lane_id) {
                    return Err(ModelError::AsymmetricNeighbor {
                        lane: lane.lane_id.clone(),
                        side: "right",
                        neighbor: r.clone(),
                    });
                }
            }
            if let Some(l) = &lane.left_neighbor {
                if self.lane(l).and_then(|x| x.right_neighbor.as_deref()) != Some(&lane.lane_id) {
                    return Err(ModelError::AsymmetricNeighbor {
                        lane: lane.lane_id.clone(),
                        side: "left",
                        neighbor: l.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }

    pub fn lane(&self, id: &str) -> Option<&Lane> {
        self.index.get(id).map(|&i| &self.lanes[i])
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    /// Lanes listing `id` among their successors.
    pub fn predecessors<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Lane> + 'a {
        self.lanes
            .iter()
            .filter(move |l| l.successors.iter().any(|s| s == id))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectorySet {
    pub trajectories: BTreeMap<String, Trajectory>,
    pub map: Option<LaneMap>,
    pub source_tag: String,
}

impl TrajectorySet {
    pub fn new(source_tag: impl Into<String>) -> Self {
        TrajectorySet {
            trajectories: BTreeMap::new(),
            map: None,
            source_tag: source_tag.into(),
        }
    }

    pub fn from_trajectories(
        source_tag: impl Into<String>,
        trajectories: impl IntoIterator<Item = Trajectory>,
    ) -> Result<Self, ModelError> {
        let mut set = TrajectorySet::new(source_tag);
        for t in trajectories {
            set.insert(t)?;
        }
        Ok(set)
    }

    pub fn with_map(mut self, map: LaneMap) -> Self {
        self.map = Some(map);
        self
    }

    pub fn insert(&mut self, traj: Trajectory) -> Result<(), ModelError> {
        traj.validate()?;
        if self.trajectories.contains_key(&traj.vehicle_id) {
            return Err(ModelError::DuplicateVehicle(traj.vehicle_id));
        }
        self.trajectories.insert(traj.vehicle_id.clone(), traj);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.get(id)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.values()
    }

    /// Resamples every trajectory to `dt` and fills in missing kinematics.
    /// Single-frame trajectories are dropped.
    pub fn prepared(&self, dt: f64) -> Result<TrajectorySet, ModelError> {
        let mut out = TrajectorySet {
            trajectories: BTreeMap::new(),
            map: self.map.clone(),
            source_tag: self.source_tag.clone(),
        };
        for traj in self.iter() {
            if traj.len() < 2 {
                continue;
            }
            let resampled = resample_uniform(traj, dt)?;
            let ready = resampled.ensure_kinematics()?;
            out.trajectories.insert(ready.vehicle_id.clone(), ready);
        }
        Ok(out)
    }

    /// Earliest frame tick across the set.
    pub fn first_tick(&self, dt: f64) -> Option<i64> {
        self.iter().map(|t| t.first_tick(dt)).min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lane(id: &str, y: f64) -> Lane {
        Lane {
            lane_id: id.into(),
            centerline: vec![[0.0, y], [100.0, y]],
            left_neighbor: None,
            right_neighbor: None,
            successors: vec![],
            is_interpolated: false,
            stop_line: None,
            allows_turn: false,
        }
    }

    #[test]
    fn trajectory_rejects_bad_input() {
        let f = vec![Frame::new(0.0, 0.0, 0.0)];
        assert!(matches!(
            Trajectory::new("a", VehicleKind::Hv, 0.0, 2.0, f.clone()),
            Err(ModelError::BadDimensions { .. })
        ));
        assert!(matches!(
            Trajectory::new("a", VehicleKind::Hv, 4.0, 2.0, vec![]),
            Err(ModelError::NoFrames(_))
        ));
        let back = vec![Frame::new(1.0, 0.0, 0.0), Frame::new(0.5, 0.0, 0.0)];
        assert!(matches!(
            Trajectory::new("a", VehicleKind::Hv, 4.0, 2.0, back),
            Err(ModelError::NonIncreasingTime { index: 1, .. })
        ));
    }

    #[test]
    fn lane_map_checks_neighbor_symmetry() {
        let mut a = lane("a", 0.0);
        let b = lane("b", -3.6);
        a.right_neighbor = Some("b".into());
        let err = LaneMap::new(vec![a.clone(), b.clone()]).unwrap_err();
        assert!(matches!(err, ModelError::AsymmetricNeighbor { .. }));

        let mut b2 = b;
        b2.left_neighbor = Some("a".into());
        let map = LaneMap::new(vec![a, b2]).unwrap();
        assert!(map.lane("a").unwrap().is_neighbor("b"));
    }

    #[test]
    fn lane_map_rejects_short_centerline_and_dangling_refs() {
        let mut a = lane("a", 0.0);
        a.centerline.truncate(1);
        assert!(matches!(
            LaneMap::new(vec![a]),
            Err(ModelError::ShortCenterline(_))
        ));
        let mut a = lane("a", 0.0);
        a.successors.push("zz".into());
        assert!(matches!(
            LaneMap::new(vec![a]),
            Err(ModelError::UnknownLane { .. })
        ));
    }

    #[test]
    fn index_at_tick_follows_grid() {
        let frames = (0..5)
            .map(|k| Frame::new(1.0 + k as f64 * 0.1, 0.0, 0.0))
            .collect();
        let t = Trajectory::new("a", VehicleKind::Av, 4.0, 2.0, frames).unwrap();
        assert_eq!(t.first_tick(0.1), 10);
        assert_eq!(t.index_at_tick(12, 0.1), Some(2));
        assert_eq!(t.index_at_tick(9, 0.1), None);
        assert_eq!(t.index_at_tick(15, 0.1), None);
    }

    #[test]
    fn band_becomes_straight_lane() {
        let band = LaneBand {
            lane_id: "b1".into(),
            y_min: 0.0,
            y_max: 3.6,
            x_min: 0.0,
            x_max: 500.0,
            left_neighbor: None,
            right_neighbor: None,
            successors: vec![],
            stop_line_x: Some(400.0),
            allows_turn: false,
        };
        let lane: Lane = band.into();
        assert_eq!(lane.centerline, vec![[0.0, 1.8], [500.0, 1.8]]);
        assert_eq!(lane.stop_line, Some([400.0, 1.8]));
    }
}
