//! Scripted synthetic scenes with known ground truth.
//!
//! Longitudinal motion follows piecewise-constant acceleration programs
//! integrated in closed form (speed clamped at zero). Lateral motion is an
//! optional smootherstep shift. The observed copy of a scene adds
//! per-frame position noise and/or a centered moving-average smoother.

use crate::error_model::ErrorModel2D;
use crate::model::{derive_kinematics, Frame, Lane, LaneMap, ModelError, Trajectory, TrajectorySet, VehicleKind, DEFAULT_DT};
use crate::rng::stream;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("smoother window must be odd and at least 3, got {0}")]
    BadWindow(usize),
    #[error("vehicles {a} and {b} overlap at t = {t:.2}")]
    Collision { a: String, b: String, t: f64 },
    #[error("invalid script: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    PlatoonStop,
    QueueDischarge,
    LaneChange,
    #[default]
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelSegment {
    pub duration: f64,
    pub accel: f64,
}

/// Lateral move of `dy` over `[start_t, start_t + duration]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateralShift {
    pub start_t: f64,
    pub duration: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleProgram {
    pub vehicle_id: String,
    #[serde(default = "default_kind")]
    pub kind: VehicleKind,
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_width")]
    pub width: f64,
    pub x0: f64,
    #[serde(default)]
    pub y0: f64,
    #[serde(default)]
    pub v0: f64,
    #[serde(default)]
    pub segments: Vec<AccelSegment>,
    #[serde(default)]
    pub lateral: Option<LateralShift>,
    /// Extra heading added after the lateral shift completes, radians.
    #[serde(default)]
    pub heading_offset: f64,
}

fn default_kind() -> VehicleKind {
    VehicleKind::Hv
}

fn default_length() -> f64 {
    4.5
}

fn default_width() -> f64 {
    1.8
}

impl VehicleProgram {
    pub fn new(id: impl Into<String>, x0: f64, v0: f64) -> Self {
        VehicleProgram {
            vehicle_id: id.into(),
            kind: VehicleKind::Hv,
            length: default_length(),
            width: default_width(),
            x0,
            y0: 0.0,
            v0,
            segments: Vec::new(),
            lateral: None,
            heading_offset: 0.0,
        }
    }

    pub fn then(mut self, duration: f64, accel: f64) -> Self {
        self.segments.push(AccelSegment { duration, accel });
        self
    }

    /// Longitudinal position and speed at time `t`. After the last segment,
    /// speed is held.
    pub fn longitudinal(&self, t: f64) -> (f64, f64) {
        let mut x = self.x0;
        let mut v = self.v0;
        let mut left = t;
        for seg in &self.segments {
            if left <= 0.0 {
                break;
            }
            let span = left.min(seg.duration);
            let (dx, v1) = advance(v, seg.accel, span);
            x += dx;
            v = v1;
            left -= span;
        }
        if left > 0.0 {
            x += v * left;
        }
        (x, v)
    }

    /// Lateral position and rate at time `t`.
    pub fn lateral(&self, t: f64) -> (f64, f64) {
        let Some(s) = self.lateral else { return (self.y0, 0.0) };
        let u = ((t - s.start_t) / s.duration).clamp(0.0, 1.0);
        let shape = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
        let rate = if u > 0.0 && u < 1.0 { 30.0 * u * u * (1.0 - u) * (1.0 - u) / s.duration } else { 0.0 };
        (self.y0 + s.dy * shape, s.dy * rate)
    }
}

/// Displacement and final speed after `span` seconds at acceleration `a`
/// starting from `v`, never reversing.
fn advance(v: f64, a: f64, span: f64) -> (f64, f64) {
    if a < 0.0 {
        let to_stop = v / -a;
        if to_stop <= span {
            return (0.5 * v * to_stop, 0.0);
        }
    }
    (v * span + 0.5 * a * span * span, (v + a * span).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    #[serde(default)]
    pub kind: ScenarioKind,
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub vehicles: Vec<VehicleProgram>,
    #[serde(default)]
    pub lanes: Vec<Lane>,
    #[serde(default)]
    pub noise: Option<ErrorModel2D>,
    /// Moving-average window in frames.
    #[serde(default)]
    pub smoother: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub truth: TrajectorySet,
    pub observed: TrajectorySet,
}

fn truth_trajectory(p: &VehicleProgram, n: usize, dt: f64) -> Result<Trajectory, ModelError> {
    let frames = (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            let (x, v) = p.longitudinal(t);
            let (y, vy) = p.lateral(t);
            let done = p.lateral.is_some_and(|s| t >= s.start_t + s.duration);
            let heading = if v > 0.0 || vy != 0.0 { vy.atan2(v) } else { 0.0 } + if done { p.heading_offset } else { 0.0 };
            Frame::new(t, x, y).with_kinematics((v * v + vy * vy).sqrt(), heading)
        })
        .collect();
    Trajectory::new(p.vehicle_id.clone(), p.kind, p.length, p.width, frames)
}

/// Vehicles sharing a lane must keep their longitudinal order; a sign
/// change (or zero) of center spacing is a collision.
fn check_collisions(set: &TrajectorySet) -> Result<(), SynthError> {
    let all: Vec<&Trajectory> = set.iter().collect();
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            let same_lane = |k: usize| (a.frames[k].y - b.frames[k].y).abs() < 0.5 * (a.width + b.width);
            let n = a.len().min(b.len());
            for k in 0..n {
                if !same_lane(k) {
                    continue;
                }
                let d = a.frames[k].x - b.frames[k].x;
                let flipped = k > 0 && same_lane(k - 1) && (a.frames[k - 1].x - b.frames[k - 1].x).signum() != d.signum();
                if d == 0.0 || flipped {
                    return Err(SynthError::Collision {
                        a: a.vehicle_id.clone(),
                        b: b.vehicle_id.clone(),
                        t: a.frames[k].t,
                    });
                }
            }
        }
    }
    Ok(())
}

pub fn generate_scene(script: &SceneScript) -> Result<Scene, SynthError> {
    if !(script.dt > 0.0) || !(script.duration > 0.0) {
        return Err(SynthError::Invalid("dt and duration must be positive".into()));
    }
    if let Some(w) = script.smoother {
        if w < 3 || w % 2 == 0 {
            return Err(SynthError::BadWindow(w));
        }
    }
    let n = (script.duration / script.dt + 1e-9).floor() as usize + 1;
    let mut truth = TrajectorySet::new("truth");
    for p in &script.vehicles {
        truth.insert(truth_trajectory(p, n, script.dt)?)?;
    }
    check_collisions(&truth)?;
    if !script.lanes.is_empty() {
        truth = truth.with_map(LaneMap::new(script.lanes.clone())?);
    }

    let mut observed = TrajectorySet {
        source_tag: "observed".into(),
        ..truth.clone()
    };
    let noisy = script.noise.filter(|m| !m.is_zero() || m.mu != [0.0, 0.0]);
    if noisy.is_some() || script.smoother.is_some() {
        for (k, traj) in observed.trajectories.values_mut().enumerate() {
            let mut t = traj.clone();
            if let Some(model) = noisy {
                let mut rng = stream(script.seed, &[k as u64]);
                for f in &mut t.frames {
                    let e = model.sample(&mut rng);
                    f.x += e[0];
                    f.y += e[1];
                }
            }
            t = match script.smoother {
                Some(w) => apply_smoother(&t, w)?,
                None => rederive(&t)?,
            };
            *traj = t;
        }
    }
    Ok(Scene { truth, observed })
}

/// Generates every script and places scene `k` at lateral offset
/// `k * spacing`, prefixing vehicle and lane ids with `s{k}_`, so the
/// scenes form one data set without interacting.
pub fn combine(scripts: &[SceneScript], spacing: f64) -> Result<Scene, SynthError> {
    let mut truth = TrajectorySet::new("truth");
    let mut observed = TrajectorySet::new("observed");
    let mut lanes = Vec::new();
    for (k, script) in scripts.iter().enumerate() {
        let scene = generate_scene(script)?;
        let dy = k as f64 * spacing;
        let prefix = |id: &str| format!("s{k}_{id}");
        for (src, dst) in [(&scene.truth, &mut truth), (&scene.observed, &mut observed)] {
            for traj in src.iter() {
                let mut t = traj.clone();
                t.vehicle_id = prefix(&t.vehicle_id);
                for f in &mut t.frames {
                    f.y += dy;
                    f.lane_id = f.lane_id.as_deref().map(prefix);
                }
                dst.insert(t)?;
            }
        }
        lanes.extend(script.lanes.iter().map(|l| Lane {
            lane_id: prefix(&l.lane_id),
            centerline: l.centerline.iter().map(|p| [p[0], p[1] + dy]).collect(),
            left_neighbor: l.left_neighbor.as_deref().map(prefix),
            right_neighbor: l.right_neighbor.as_deref().map(prefix),
            successors: l.successors.iter().map(|s| prefix(s)).collect(),
            is_interpolated: l.is_interpolated,
            stop_line: l.stop_line.map(|p| [p[0], p[1] + dy]),
            allows_turn: l.allows_turn,
        }));
    }
    if !lanes.is_empty() {
        let map = LaneMap::new(lanes)?;
        truth = truth.with_map(map.clone());
        observed = observed.with_map(map);
    }
    Ok(Scene { truth, observed })
}

fn rederive(t: &Trajectory) -> Result<Trajectory, ModelError> {
    let mut bare = t.clone();
    for f in &mut bare.frames {
        f.v = None;
        f.heading = None;
    }
    derive_kinematics(&bare)
}

/// Centered moving average of positions over `window` frames. Near the
/// ends the window shrinks symmetrically. Speed and heading are derived
/// again from the smoothed positions.
pub fn apply_smoother(traj: &Trajectory, window: usize) -> Result<Trajectory, SynthError> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(SynthError::BadWindow(window));
    }
    let n = traj.len();
    let half = window / 2;
    let mut out = traj.clone();
    for (i, f) in out.frames.iter_mut().enumerate() {
        let h = half.min(i).min(n - 1 - i);
        if h == 0 {
            continue;
        }
        let (a, b) = (i - h, i + h + 1);
        let m = (b - a) as f64;
        f.x = traj.frames[a..b].iter().map(|g| g.x).sum::<f64>() / m;
        f.y = traj.frames[a..b].iter().map(|g| g.y).sum::<f64>() / m;
    }
    Ok(rederive(&out)?)
}

/// Leader braking from `v0` to a stop at `decel`, follower braking to stop
/// `final_gap` m (center to center) behind it.
pub fn platoon_stop(v0: f64, decel: f64, final_gap: f64, brake_at: f64, total: f64) -> SceneScript {
    let leader_stop = v0 * v0 / (2.0 * decel);
    let follower_brake = brake_at + 1.0;
    // follower starts far enough back to stop exactly `final_gap` behind
    let lead_x0 = 50.0;
    let follower_x0 = lead_x0 + v0 * brake_at + leader_stop - final_gap - v0 * follower_brake - leader_stop;
    let lead = VehicleProgram::new("lead", lead_x0, v0).then(brake_at, 0.0).then(v0 / decel + 1.0, -decel);
    let follow = VehicleProgram::new("follow", follower_x0, v0)
        .then(follower_brake, 0.0)
        .then(v0 / decel + 1.0, -decel);
    let lane = Lane {
        lane_id: "lane".into(),
        centerline: vec![[-1000.0, 0.0], [3000.0, 0.0]],
        left_neighbor: None,
        right_neighbor: None,
        successors: Vec::new(),
        is_interpolated: false,
        stop_line: None,
        allows_turn: false,
    };
    SceneScript {
        kind: ScenarioKind::PlatoonStop,
        duration: total,
        dt: DEFAULT_DT,
        vehicles: vec![lead, follow],
        lanes: vec![lane],
        noise: None,
        smoother: None,
        seed: 0,
    }
}

/// Queue of stopped vehicles released at the stop line `x = 0`. Vehicle
/// `k` waits with its front bumper `gaps[k]` m behind the line and starts
/// accelerating at `accel` so its front bumper reaches the line at
/// `pass_times[k]`.
pub fn queue_discharge(pass_times: &[f64], gaps: &[f64], kinds: &[VehicleKind], accel: f64, total: f64) -> SceneScript {
    let length = default_length();
    let vehicles = pass_times
        .iter()
        .zip(gaps)
        .enumerate()
        .map(|(k, (&pass, &d))| {
            let go = pass - (2.0 * d / accel).sqrt();
            let mut p = VehicleProgram::new(format!("q{k}"), -d - 0.5 * length, 0.0)
                .then(go.max(0.0), 0.0)
                .then(total, accel);
            p.kind = kinds.get(k).copied().unwrap_or(VehicleKind::Hv);
            p
        })
        .collect();
    let approach = Lane {
        lane_id: "approach".into(),
        centerline: vec![[-300.0, 0.0], [0.0, 0.0]],
        left_neighbor: None,
        right_neighbor: None,
        successors: vec!["through".into()],
        is_interpolated: false,
        stop_line: Some([0.0, 0.0]),
        allows_turn: false,
    };
    let through = Lane {
        lane_id: "through".into(),
        centerline: vec![[0.0, 0.0], [2000.0, 0.0]],
        successors: Vec::new(),
        stop_line: None,
        ..approach.clone()
    };
    SceneScript {
        kind: ScenarioKind::QueueDischarge,
        duration: total,
        dt: DEFAULT_DT,
        vehicles,
        lanes: vec![approach, through],
        noise: None,
        smoother: None,
        seed: 0,
    }
}

/// Ego changing from the left lane (`y = 3.5`) to the right lane (`y = 0`)
/// with lead and lag vehicles in the target lane. The lateral shift is
/// centered on `cross_t`.
pub fn lane_change(speed: f64, lead_offset: f64, lag_offset: f64, cross_t: f64, shift_duration: f64, total: f64) -> SceneScript {
    let mut ego = VehicleProgram::new("ego", 0.0, speed);
    ego.y0 = 3.5;
    ego.lateral = Some(LateralShift {
        start_t: cross_t - 0.5 * shift_duration,
        duration: shift_duration,
        dy: -3.5,
    });
    let lead = VehicleProgram::new("lead", lead_offset, speed);
    let lag = VehicleProgram::new("lag", -lag_offset, speed);
    let lane = |id: &str, y: f64, left: Option<&str>, right: Option<&str>| Lane {
        lane_id: id.into(),
        centerline: vec![[-500.0, y], [3000.0, y]],
        left_neighbor: left.map(Into::into),
        right_neighbor: right.map(Into::into),
        successors: Vec::new(),
        is_interpolated: false,
        stop_line: None,
        allows_turn: false,
    };
    SceneScript {
        kind: ScenarioKind::LaneChange,
        duration: total,
        dt: DEFAULT_DT,
        vehicles: vec![ego, lead, lag],
        lanes: vec![lane("left", 3.5, None, Some("right")), lane("right", 0.0, Some("left"), None)],
        noise: None,
        smoother: None,
        seed: 0,
    }
}

/// A mixed set of scenes exercising every extractor: three platoon stops,
/// a four-vehicle queue discharge and two lane changes. `variant` shifts
/// speeds and timings so two variants are similar but not identical.
pub fn demo_scripts(variant: u32) -> Vec<SceneScript> {
    let v = variant as f64;
    let mut out = vec![
        platoon_stop(8.0 + 0.5 * v, 2.0, 3.0, 5.0, 20.0),
        platoon_stop(10.0 + 0.5 * v, 2.5, 3.5, 6.0, 22.0),
        platoon_stop(9.0 - 0.5 * v, 1.5, 3.2, 4.0, 22.0),
        queue_discharge(
            &[2.0, 4.4 + 0.2 * v, 6.6 + 0.3 * v, 8.7 + 0.4 * v],
            &[0.5, 7.0, 13.5, 20.0],
            &[VehicleKind::Hv, VehicleKind::Av, VehicleKind::Hv, VehicleKind::Hv],
            2.0,
            20.0,
        ),
    ];
    for (speed, lead, lag, shift) in [(12.0 + v, 20.0, 15.0, 4.0), (14.0 - v, 25.0, 12.0, 3.0)] {
        let mut lc = lane_change(speed, lead, lag, 8.0, shift, 16.0);
        lc.vehicles[1] = lc.vehicles[1].clone().then(16.0, 0.3);
        lc.vehicles[2] = lc.vehicles[2].clone().then(4.0, 0.0).then(12.0, -0.2);
        out.push(lc);
    }
    out
}
