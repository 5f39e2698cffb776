use super::{HeadwayConfig, HeadwayRecord, LaneContext, PairType};
use crate::model::{Lane, Trajectory, TrajectorySet};

fn front_s(lane: &Lane, traj: &Trajectory, i: usize) -> f64 {
    let f = &traj.frames[i];
    let h = traj.heading(i);
    let h = if h.is_finite() { h } else { 0.0 };
    let half = 0.5 * traj.length;
    lane.project([f.x + half * h.cos(), f.y + half * h.sin()]).s
}

/// First frame after the start at which the front bumper reaches the stop
/// line from behind.
fn pass_index(lane: &Lane, traj: &Trajectory, start: usize, s_stop: f64) -> Option<usize> {
    if front_s(lane, traj, start) >= s_stop {
        return None;
    }
    (start + 1..traj.len()).find(|&k| front_s(lane, traj, k) >= s_stop)
}

/// Discharge headways per through lane with a stop line.
///
/// The queue is formed from vehicles on the lane at the set's first frame,
/// upstream of the stop line and slower than the waiting speed, ordered by
/// distance to the stop line. A lane whose most downstream vehicle is
/// moving is skipped. The queue is cut at the first vehicle that is not
/// waiting, never crosses the line, or turns after crossing.
pub fn extract_discharge_headways(set: &TrajectorySet, ctx: &LaneContext<'_>, cfg: &HeadwayConfig) -> Vec<HeadwayRecord> {
    let dt = cfg.dt;
    let Some(tick0) = set.first_tick(dt) else {
        return Vec::new();
    };
    let mut lanes: Vec<&Lane> = ctx.map.lanes().iter().filter(|l| !l.allows_turn && !l.is_interpolated).collect();
    lanes.sort_by(|a, b| a.lane_id.cmp(&b.lane_id));
    let mut out = Vec::new();
    for lane in lanes {
        let Some(stop) = lane.stop_line else {
            tracing::debug!(lane = %lane.lane_id, "lane has no stop line; skipped");
            continue;
        };
        let s_stop = lane.project(stop).s;
        let mut queue: Vec<(&Trajectory, usize, f64)> = set
            .iter()
            .filter_map(|t| {
                let i = t.index_at_tick(tick0, dt)?;
                if ctx.lane_at(&t.vehicle_id, i) != Some(lane.lane_id.as_str()) {
                    return None;
                }
                let s = lane.project(t.frames[i].position()).s;
                (s <= s_stop).then_some((t, i, s_stop - s))
            })
            .collect();
        queue.sort_by(|a, b| a.2.total_cmp(&b.2).then_with(|| a.0.vehicle_id.cmp(&b.0.vehicle_id)));
        let Some(&(head, hi, _)) = queue.first() else { continue };
        if !(head.speed(hi) < cfg.waiting_speed_mps) {
            continue;
        }

        let mut prev: Option<(&Trajectory, f64)> = None;
        for (pos, &(t, i, _)) in queue.iter().enumerate() {
            if !(t.speed(i) < cfg.waiting_speed_mps) {
                break;
            }
            let Some(k) = pass_index(lane, t, i, s_stop) else { break };
            let turned = ctx
                .assignments
                .get(&t.vehicle_id)
                .and_then(|a| a[k..].iter().flatten().find(|id| id.as_str() != lane.lane_id))
                .and_then(|id| ctx.map.lane(id))
                .is_some_and(|l| l.allows_turn);
            if turned {
                break;
            }
            let pass_t = t.frames[k].t;
            if let Some((p, p_t)) = prev {
                let headway = pass_t - p_t;
                if !(headway > 0.0) {
                    break;
                }
                out.push(HeadwayRecord {
                    lane_id: lane.lane_id.clone(),
                    queue_position: pos + 1,
                    headway,
                    pair_type: PairType::of(t.kind, p.kind),
                    leader_id: p.vehicle_id.clone(),
                    follower_id: t.vehicle_id.clone(),
                    pass_t,
                });
            }
            prev = Some((t, pass_t));
        }
    }
    out
}
