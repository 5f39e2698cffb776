use super::{frames_of, LaneChangeEvent, LaneConfig, LaneContext, LcEpisode, LcRejection, LcState};
use crate::model::{tick_of, TrajectorySet};

/// Six-channel lane-change episode over `cross_t ± half_window_s`.
///
/// Lead and lag are the nearest vehicles ahead of and behind the ego at the
/// crossing frame among those assigned to the target lane, its successors or
/// its predecessors; both must have frames for the whole window. All
/// longitudinal and lateral quantities are measured in the target lane's
/// (s, offset) frame, with `dx`, `dy` relative to the ego at window start.
pub fn build_lc_episode(
    event: &LaneChangeEvent,
    set: &TrajectorySet,
    ctx: &LaneContext<'_>,
    cfg: &LaneConfig,
) -> Result<LcEpisode, LcRejection> {
    let dt = cfg.dt;
    let ego = set.get(&event.vehicle_id).ok_or(LcRejection::BoundaryTruncation)?;
    let lane = ctx.map.lane(&event.to_lane).ok_or(LcRejection::UnknownLane)?;
    let half = frames_of(cfg.half_window_s, dt);
    if event.cross_index < half || event.cross_index + half >= ego.len() {
        return Err(LcRejection::BoundaryTruncation);
    }
    let first = event.cross_index - half;
    let cross_tick = tick_of(event.cross_t, dt);
    let start_tick = cross_tick - half as i64;
    let ticks = start_tick..=cross_tick + half as i64;

    let corridor: Vec<&str> = std::iter::once(lane.lane_id.as_str())
        .chain(lane.successors.iter().map(String::as_str))
        .chain(ctx.map.predecessors(&lane.lane_id).map(|l| l.lane_id.as_str()))
        .collect();
    let s_ego = lane.project(ego.frames[event.cross_index].position()).s;

    let mut lead: Option<(&str, f64)> = None;
    let mut lag: Option<(&str, f64)> = None;
    for other in set.iter() {
        if other.vehicle_id == ego.vehicle_id {
            continue;
        }
        let Some(j) = other.index_at_tick(cross_tick, dt) else { continue };
        if !ctx.lane_at(&other.vehicle_id, j).is_some_and(|l| corridor.contains(&l)) {
            continue;
        }
        if !ticks.clone().all(|t| other.index_at_tick(t, dt).is_some()) {
            continue;
        }
        let ds = lane.project(other.frames[j].position()).s - s_ego;
        if ds > 0.0 && lead.is_none_or(|(_, d)| ds < d) {
            lead = Some((other.vehicle_id.as_str(), ds));
        } else if ds < 0.0 && lag.is_none_or(|(_, d)| -ds < d) {
            lag = Some((other.vehicle_id.as_str(), -ds));
        }
    }
    let lead = set.get(lead.ok_or(LcRejection::MissingLead)?.0).expect("lead in set");
    let lag = set.get(lag.ok_or(LcRejection::MissingLag)?.0).expect("lag in set");

    let origin = lane.project(ego.frames[first].position());
    let states = ticks
        .enumerate()
        .map(|(k, tick)| {
            let e = first + k;
            let i = lead.index_at_tick(tick, dt).expect("checked above");
            let j = lag.index_at_tick(tick, dt).expect("checked above");
            let pe = lane.project(ego.frames[e].position());
            let v = ego.speed(e);
            LcState {
                dx: pe.s - origin.s,
                dy: pe.offset - origin.offset,
                g_lead: lane.project(lead.frames[i].position()).s - pe.s,
                g_lag: pe.s - lane.project(lag.frames[j].position()).s,
                dv_lead: lead.speed(i) - v,
                dv_lag: v - lag.speed(j),
            }
        })
        .collect();
    Ok(LcEpisode {
        ego_id: ego.vehicle_id.clone(),
        lead_id: lead.vehicle_id.clone(),
        lag_id: lag.vehicle_id.clone(),
        ego_kind: ego.kind,
        from_lane: event.from_lane.clone(),
        to_lane: event.to_lane.clone(),
        direction: event.direction,
        cross_t: event.cross_t,
        start_t: ego.frames[first].t,
        dt,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::detect_lane_changes;
    use crate::model::{Frame, Lane, LaneMap, Trajectory, VehicleKind};

    fn lane(id: &str, y: f64, left: Option<&str>, right: Option<&str>) -> Lane {
        Lane {
            lane_id: id.into(),
            centerline: vec![[-100.0, y], [400.0, y]],
            left_neighbor: left.map(Into::into),
            right_neighbor: right.map(Into::into),
            successors: vec![],
            is_interpolated: false,
            stop_line: None,
            allows_turn: false,
        }
    }

    fn vehicle(id: &str, n: usize, pos: impl Fn(f64) -> (f64, f64), v: f64) -> Trajectory {
        let frames = (0..n)
            .map(|i| {
                let t = i as f64 * 0.1;
                let (x, y) = pos(t);
                Frame::new(t, x, y).with_kinematics(v, 0.0)
            })
            .collect();
        Trajectory::new(id, VehicleKind::Hv, 4.5, 1.8, frames).unwrap()
    }

    fn scene(with_lag: bool) -> (TrajectorySet, LaneMap) {
        let map = LaneMap::new(vec![lane("A", 3.5, None, Some("B")), lane("B", 0.0, Some("A"), None)]).unwrap();
        let ego_y = |t: f64| 3.5 - 3.5 / (1.0 + (-(t - 6.0) * 3.0).exp());
        let mut v = vec![
            vehicle("ego", 121, |t| (10.0 * t, ego_y(t)), 10.0),
            vehicle("lead", 121, |t| (11.0 * t + 9.0, 0.0), 11.0),
        ];
        if with_lag {
            v.push(vehicle("lag", 121, |t| (9.0 * t - 6.0, 0.0), 9.0));
        }
        (TrajectorySet::from_trajectories("t", v).unwrap(), map)
    }

    #[test]
    fn builds_full_window() {
        let (set, map) = scene(true);
        let ctx = LaneContext::new(&set, &map, 10.0);
        let cfg = LaneConfig::default();
        let ego = set.get("ego").unwrap();
        let ev = detect_lane_changes(ego, &ctx.assignments["ego"], &map, &cfg);
        assert_eq!(ev.len(), 1);
        let ep = build_lc_episode(&ev[0], &set, &ctx, &cfg).unwrap();
        assert_eq!(ep.len(), 61);
        assert_eq!((ep.lead_id.as_str(), ep.lag_id.as_str()), ("lead", "lag"));
        assert_eq!((ep.states[0].dx, ep.states[0].dy), (0.0, 0.0));
        // at the crossing (t = 6.1): lead 15 m ahead, lag 12 m behind
        let c = &ep.states[30];
        assert!((c.g_lead - (11.0 * 6.1 + 9.0 - 61.0)).abs() < 1e-9);
        assert!((c.g_lag - (61.0 - (9.0 * 6.1 - 6.0))).abs() < 1e-9);
        assert!((c.dv_lead - 1.0).abs() < 1e-12 && (c.dv_lag - 1.0).abs() < 1e-12);
        assert!((ep.states[60].dx - 60.0).abs() < 1e-9);
        assert!(ep.states[60].dy < -3.0);
    }

    #[test]
    fn missing_lag_rejected() {
        let (set, map) = scene(false);
        let ctx = LaneContext::new(&set, &map, 10.0);
        let cfg = LaneConfig::default();
        let ev = detect_lane_changes(set.get("ego").unwrap(), &ctx.assignments["ego"], &map, &cfg);
        assert_eq!(build_lc_episode(&ev[0], &set, &ctx, &cfg), Err(LcRejection::MissingLag));
    }

    #[test]
    fn truncated_window_rejected() {
        let (set, map) = scene(true);
        let ctx = LaneContext::new(&set, &map, 10.0);
        let cfg = LaneConfig::default();
        let mut ev = detect_lane_changes(set.get("ego").unwrap(), &ctx.assignments["ego"], &map, &cfg)[0].clone();
        ev.cross_index = 100;
        ev.cross_t = 10.0;
        assert_eq!(build_lc_episode(&ev, &set, &ctx, &cfg), Err(LcRejection::BoundaryTruncation));
    }
}
