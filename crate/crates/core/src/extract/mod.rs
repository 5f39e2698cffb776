//! Behavioral episode extraction: car-following pairs, decelerating-to-stop
//! segments, lane changes and intersection discharge headways.

mod cf;
mod headway;
mod lanes;
mod lc;
mod stop;

pub use cf::extract_cf_pairs;
pub use headway::extract_discharge_headways;
pub use lanes::{assign_lane, detect_lane_changes, LaneContext};
pub use lc::build_lc_episode;
pub use stop::extract_stop_segments;

use crate::model::{VehicleKind, DEFAULT_DT};
use crate::series::MultiSeries;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Car-following state at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfState {
    /// Center-to-center longitudinal spacing, m.
    pub g: f64,
    /// Leader speed minus follower speed, m/s.
    pub dv: f64,
    /// Follower speed, m/s.
    pub vf: f64,
}

impl CfState {
    pub fn new(g: f64, dv: f64, vf: f64) -> Self {
        CfState { g, dv, vf }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.g, self.dv, self.vf]
    }
}

pub(crate) fn cf_series(states: &[CfState]) -> MultiSeries {
    let frames: Vec<[f64; 3]> = states.iter().map(|s| s.to_array()).collect();
    MultiSeries::from_frames(&frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfEpisode {
    pub follower_id: String,
    pub leader_id: String,
    pub follower_kind: VehicleKind,
    pub leader_kind: VehicleKind,
    pub start_t: f64,
    pub end_t: f64,
    pub dt: f64,
    pub states: Vec<CfState>,
    /// Bumper-to-bumper gap per frame; informational only.
    pub bumper_gap: Vec<f64>,
}

impl CfEpisode {
    pub fn id(&self) -> String {
        format!("{}->{}@{:.1}", self.follower_id, self.leader_id, self.start_t)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.end_t - self.start_t
    }

    /// Channels (g, dv, vf).
    pub fn series(&self) -> MultiSeries {
        cf_series(&self.states)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopSegment {
    pub parent_id: String,
    pub follower_id: String,
    pub leader_id: String,
    pub follower_kind: VehicleKind,
    /// Inclusive frame range within the parent episode.
    pub start_index: usize,
    pub end_index: usize,
    pub start_t: f64,
    pub stop_onset_t: f64,
    pub dt: f64,
    pub states: Vec<CfState>,
}

impl StopSegment {
    pub fn id(&self) -> String {
        format!("{}#{}", self.parent_id, self.start_index)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn duration(&self) -> f64 {
        (self.states.len().saturating_sub(1)) as f64 * self.dt
    }

    pub fn series(&self) -> MultiSeries {
        cf_series(&self.states)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeEvent {
    pub vehicle_id: String,
    /// Index of the first frame assigned to the new lane.
    pub cross_index: usize,
    pub cross_t: f64,
    pub from_lane: String,
    pub to_lane: String,
    pub direction: Direction,
}

/// Six-channel lane-change state per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LcState {
    pub dx: f64,
    pub dy: f64,
    pub g_lead: f64,
    pub g_lag: f64,
    pub dv_lead: f64,
    pub dv_lag: f64,
}

impl LcState {
    pub fn to_array(self) -> [f64; 6] {
        [self.dx, self.dy, self.g_lead, self.g_lag, self.dv_lead, self.dv_lag]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcEpisode {
    pub ego_id: String,
    pub lead_id: String,
    pub lag_id: String,
    pub ego_kind: VehicleKind,
    pub from_lane: String,
    pub to_lane: String,
    pub direction: Direction,
    pub cross_t: f64,
    pub start_t: f64,
    pub dt: f64,
    pub states: Vec<LcState>,
}

impl LcEpisode {
    pub fn id(&self) -> String {
        format!("{}@{:.1}", self.ego_id, self.cross_t)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Channels (dx, dy, g_lead, g_lag, dv_lead, dv_lag).
    pub fn series(&self) -> MultiSeries {
        let frames: Vec<[f64; 6]> = self.states.iter().map(|s| s.to_array()).collect();
        MultiSeries::from_frames(&frames)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LcRejection {
    #[error("window extends beyond the ego trajectory")]
    BoundaryTruncation,
    #[error("no lead vehicle in the target lane for the full window")]
    MissingLead,
    #[error("no lag vehicle in the target lane for the full window")]
    MissingLag,
    #[error("target lane is not in the map")]
    UnknownLane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairType {
    #[serde(rename = "HV_HV")]
    HvHv,
    /// AV following an HV.
    #[serde(rename = "AV_HV")]
    AvHv,
    /// HV following an AV.
    #[serde(rename = "HV_AV")]
    HvAv,
    #[serde(rename = "AV_AV")]
    AvAv,
}

impl PairType {
    pub fn of(follower: VehicleKind, leader: VehicleKind) -> Self {
        match (follower, leader) {
            (VehicleKind::Hv, VehicleKind::Hv) => PairType::HvHv,
            (VehicleKind::Av, VehicleKind::Hv) => PairType::AvHv,
            (VehicleKind::Hv, VehicleKind::Av) => PairType::HvAv,
            (VehicleKind::Av, VehicleKind::Av) => PairType::AvAv,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairType::HvHv => "HV_HV",
            PairType::AvHv => "AV_HV",
            PairType::HvAv => "HV_AV",
            PairType::AvAv => "AV_AV",
        }
    }
}

impl std::fmt::Display for PairType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadwayRecord {
    pub lane_id: String,
    pub queue_position: usize,
    pub headway: f64,
    pub pair_type: PairType,
    pub leader_id: String,
    pub follower_id: String,
    pub pass_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfConfig {
    pub min_duration_s: f64,
    pub max_gap_m: f64,
    pub min_peak_speed_mps: f64,
    /// Lateral tolerance for same-lane leaders when no map is available.
    pub half_lane_width_m: f64,
    pub dt: f64,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            min_duration_s: 10.0,
            max_gap_m: 50.0,
            min_peak_speed_mps: 3.0,
            half_lane_width_m: 1.8,
            dt: DEFAULT_DT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopThresholds {
    pub alpha_mps: f64,
    pub beta_s: f64,
    pub gamma_min_s: f64,
    pub gamma_max_s: f64,
    pub delta_m: f64,
    /// Per-frame speed increase still counted as non-increasing.
    pub onset_tolerance_mps: f64,
    /// Time kept after the follower's stop onset.
    pub stop_tail_s: f64,
}

impl Default for StopThresholds {
    fn default() -> Self {
        StopThresholds {
            alpha_mps: 1.0,
            beta_s: 1.0,
            gamma_min_s: 3.0,
            gamma_max_s: 10.0,
            delta_m: 4.0,
            onset_tolerance_mps: 0.05,
            stop_tail_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaneConfig {
    /// Frames farther than this from every candidate centerline are
    /// unassigned.
    pub max_distance_m: f64,
    pub max_heading_change_rad: f64,
    pub half_window_s: f64,
    /// Events this soon after leaving a turning lane are dropped.
    pub turn_guard_s: f64,
    pub dt: f64,
}

impl Default for LaneConfig {
    fn default() -> Self {
        LaneConfig {
            max_distance_m: 10.0,
            max_heading_change_rad: 0.2,
            half_window_s: 3.0,
            turn_guard_s: 5.0,
            dt: DEFAULT_DT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadwayConfig {
    /// Vehicles slower than this at the initial frame count as waiting.
    pub waiting_speed_mps: f64,
    pub dt: f64,
}

impl Default for HeadwayConfig {
    fn default() -> Self {
        HeadwayConfig {
            waiting_speed_mps: 0.5,
            dt: DEFAULT_DT,
        }
    }
}

pub(crate) fn frames_of(seconds: f64, dt: f64) -> usize {
    (seconds / dt).round() as usize
}
