use super::{frames_of, Direction, LaneChangeEvent, LaneConfig};
use crate::model::{LaneMap, Trajectory, TrajectorySet};
use std::collections::BTreeMap;

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

fn nearest<'a>(p: [f64; 2], map: &'a LaneMap, candidates: impl Iterator<Item = &'a str>) -> Option<(&'a str, f64)> {
    let mut best: Option<(&str, f64)> = None;
    for id in candidates {
        if let Some(lane) = map.lane(id) {
            let d = lane.project(p).distance;
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((lane.lane_id.as_str(), d));
            }
        }
    }
    best
}

/// Per-frame lane assignment. The first frame, and any frame after an
/// unassigned one, takes the globally nearest centerline; afterwards the
/// vehicle may only move to the current lane's successors or immediate
/// neighbors, and only when strictly nearer than the current lane.
pub fn assign_lane(traj: &Trajectory, map: &LaneMap, max_distance: f64) -> Vec<Option<String>> {
    let mut out: Vec<Option<String>> = Vec::with_capacity(traj.len());
    let mut current: Option<&str> = None;
    for frame in &traj.frames {
        let p = frame.position();
        let pick = match current.and_then(|id| map.lane(id)) {
            None => nearest(p, map, map.lanes().iter().map(|l| l.lane_id.as_str())),
            Some(lane) => {
                let here = lane.project(p).distance;
                let others = lane
                    .successors
                    .iter()
                    .chain(lane.left_neighbor.iter())
                    .chain(lane.right_neighbor.iter())
                    .map(String::as_str);
                match nearest(p, map, others) {
                    Some((id, d)) if d < here => Some((id, d)),
                    _ => Some((lane.lane_id.as_str(), here)),
                }
            }
        };
        current = pick.filter(|&(_, d)| d <= max_distance).map(|(id, _)| id);
        out.push(current.map(str::to_owned));
    }
    out
}

/// Lane map plus the lane assignment of every vehicle in a set.
#[derive(Debug, Clone)]
pub struct LaneContext<'a> {
    pub map: &'a LaneMap,
    pub assignments: BTreeMap<String, Vec<Option<String>>>,
}

impl<'a> LaneContext<'a> {
    pub fn new(set: &TrajectorySet, map: &'a LaneMap, max_distance: f64) -> Self {
        let assignments = set
            .iter()
            .map(|t| (t.vehicle_id.clone(), assign_lane(t, map, max_distance)))
            .collect();
        LaneContext { map, assignments }
    }

    pub fn lane_at(&self, vehicle_id: &str, index: usize) -> Option<&str> {
        self.assignments
            .get(vehicle_id)
            .and_then(|a| a.get(index))
            .and_then(|l| l.as_deref())
    }
}

/// Lane changes in one trajectory given its lane assignment.
pub fn detect_lane_changes(
    traj: &Trajectory,
    assignment: &[Option<String>],
    map: &LaneMap,
    cfg: &LaneConfig,
) -> Vec<LaneChangeEvent> {
    let n = traj.len().min(assignment.len());
    let half = frames_of(cfg.half_window_s, cfg.dt);
    let mut events = Vec::new();
    for k in 1..n {
        let (Some(from), Some(to)) = (assignment[k - 1].as_deref(), assignment[k].as_deref()) else {
            continue;
        };
        if from == to {
            continue;
        }
        let (Some(a), Some(b)) = (map.lane(from), map.lane(to)) else {
            continue;
        };
        let direction = if a.left_neighbor.as_deref() == Some(to) {
            Direction::Left
        } else if a.right_neighbor.as_deref() == Some(to) {
            Direction::Right
        } else {
            continue;
        };
        if a.is_interpolated || b.is_interpolated {
            continue;
        }
        let t = traj.frames[k].t;
        let after_turn = (0..k).rev().take_while(|&i| t - traj.frames[i].t <= cfg.turn_guard_s + 1e-9).any(|i| {
            assignment[i]
                .as_deref()
                .filter(|&id| id != from && id != to)
                .and_then(|id| map.lane(id))
                .is_some_and(|l| l.allows_turn)
        });
        if after_turn {
            continue;
        }
        let before = traj.heading(k.saturating_sub(half));
        let after = traj.heading((k + half).min(traj.len() - 1));
        if !(wrap_angle(after - before).abs() < cfg.max_heading_change_rad) {
            continue;
        }
        events.push(LaneChangeEvent {
            vehicle_id: traj.vehicle_id.clone(),
            cross_index: k,
            cross_t: t,
            from_lane: from.to_owned(),
            to_lane: to.to_owned(),
            direction,
        });
    }
    events
}
