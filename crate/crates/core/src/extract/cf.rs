use super::{CfConfig, CfEpisode, CfState, LaneContext};
use crate::model::{tick_of, Trajectory, TrajectorySet};

/// Leader candidate at one frame: (leader id, frame index in leader, g).
type Lead<'s> = Option<(&'s str, usize, f64)>;

fn leader_by_offset<'s>(set: &'s TrajectorySet, f: &Trajectory, i: usize, dt: f64, half_width: f64) -> Lead<'s> {
    let me = &f.frames[i];
    let tick = tick_of(me.t, dt);
    let mut best: Lead<'s> = None;
    for other in set.iter() {
        if other.vehicle_id == f.vehicle_id {
            continue;
        }
        let Some(j) = other.index_at_tick(tick, dt) else { continue };
        let o = &other.frames[j];
        let g = o.x - me.x;
        if g > 0.0 && (o.y - me.y).abs() < half_width && best.is_none_or(|(_, _, bg)| g < bg) {
            best = Some((other.vehicle_id.as_str(), j, g));
        }
    }
    best
}

fn leader_in_lane<'s>(set: &'s TrajectorySet, ctx: &LaneContext<'_>, f: &Trajectory, i: usize, dt: f64) -> Lead<'s> {
    let lane_id = ctx.lane_at(&f.vehicle_id, i)?;
    let lane = ctx.map.lane(lane_id)?;
    let me = &f.frames[i];
    let s_me = lane.project(me.position()).s;
    let tick = tick_of(me.t, dt);
    let mut best: Lead<'s> = None;
    for other in set.iter() {
        if other.vehicle_id == f.vehicle_id {
            continue;
        }
        let Some(j) = other.index_at_tick(tick, dt) else { continue };
        if ctx.lane_at(&other.vehicle_id, j) != Some(lane_id) {
            continue;
        }
        let g = lane.project(other.frames[j].position()).s - s_me;
        if g > 0.0 && best.is_none_or(|(_, _, bg)| g < bg) {
            best = Some((other.vehicle_id.as_str(), j, g));
        }
    }
    best
}

/// Car-following episodes: maximal runs of frames with the same immediate
/// leader at spacing `0 < g <= max_gap_m`, kept when they last at least
/// `min_duration_s` and the follower exceeds `min_peak_speed_mps`.
///
/// Leaders come from lane assignment when a lane context is given,
/// otherwise from longitudinal order within `half_lane_width_m` laterally.
/// Trajectories must already be resampled to `cfg.dt` with kinematics.
pub fn extract_cf_pairs(set: &TrajectorySet, lanes: Option<&LaneContext<'_>>, cfg: &CfConfig) -> Vec<CfEpisode> {
    let dt = cfg.dt;
    let mut out = Vec::new();
    for f in set.iter() {
        let leads: Vec<Lead<'_>> = (0..f.len())
            .map(|i| match lanes {
                Some(ctx) => leader_in_lane(set, ctx, f, i, dt),
                None => leader_by_offset(set, f, i, dt, cfg.half_lane_width_m),
            })
            .map(|l| l.filter(|&(_, _, g)| g <= cfg.max_gap_m))
            .collect();
        let mut i = 0;
        while i < leads.len() {
            let Some((lid, _, _)) = leads[i] else {
                i += 1;
                continue;
            };
            let mut end = i;
            while end + 1 < leads.len() && leads[end + 1].is_some_and(|(id, _, _)| id == lid) {
                end += 1;
            }
            if let Some(ep) = build(set, f, lid, &leads[i..=end], i, cfg) {
                out.push(ep);
            }
            i = end + 1;
        }
    }
    out
}

fn build(set: &TrajectorySet, f: &Trajectory, lid: &str, run: &[Lead<'_>], start: usize, cfg: &CfConfig) -> Option<CfEpisode> {
    let l = set.get(lid)?;
    let start_t = f.frames[start].t;
    let end_t = f.frames[start + run.len() - 1].t;
    if end_t - start_t < cfg.min_duration_s - 1e-9 {
        return None;
    }
    let peak = (start..start + run.len()).map(|i| f.speed(i)).fold(f64::NEG_INFINITY, f64::max);
    if !(peak > cfg.min_peak_speed_mps) {
        return None;
    }
    let half_lengths = 0.5 * (f.length + l.length);
    let mut states = Vec::with_capacity(run.len());
    let mut bumper_gap = Vec::with_capacity(run.len());
    for (k, lead) in run.iter().enumerate() {
        let (_, j, g) = lead.expect("run frames have a leader");
        let vf = f.speed(start + k);
        states.push(CfState::new(g, l.speed(j) - vf, vf));
        bumper_gap.push(g - half_lengths);
    }
    Some(CfEpisode {
        follower_id: f.vehicle_id.clone(),
        leader_id: lid.to_owned(),
        follower_kind: f.kind,
        leader_kind: l.kind,
        start_t,
        end_t,
        dt: cfg.dt,
        states,
        bumper_gap,
    })
}
