use super::{frames_of, CfEpisode, StopSegment, StopThresholds};

/// Decelerating-to-stop segments within car-following episodes.
///
/// A segment is anchored on a window where both vehicles move slower than
/// `alpha` for at least `beta`. The follower's stop onset is the first
/// frame of its slow run after which speed stops falling; the segment ends
/// `stop_tail_s` later. The start is found by walking back over the
/// follower's non-increasing speed run (with `onset_tolerance_mps` slack per
/// frame), skipping any leading constant-speed plateau, and is capped so the
/// segment never exceeds `gamma_max`.
pub fn extract_stop_segments(episodes: &[CfEpisode], th: &StopThresholds) -> Vec<StopSegment> {
    episodes.iter().flat_map(|ep| segments_of(ep, th)).collect()
}

fn segments_of(ep: &CfEpisode, th: &StopThresholds) -> Vec<StopSegment> {
    let n = ep.states.len();
    let dt = ep.dt;
    let vf: Vec<f64> = ep.states.iter().map(|s| s.vf).collect();
    let vl: Vec<f64> = ep.states.iter().map(|s| s.vf + s.dv).collect();
    let tail = frames_of(th.stop_tail_s, dt);
    let max_len = frames_of(th.gamma_max_s, dt);
    let tol = th.onset_tolerance_mps;
    let mut out: Vec<StopSegment> = Vec::new();

    let mut i = 0;
    while i < n {
        if !(vf[i] < th.alpha_mps && vl[i] < th.alpha_mps) {
            i += 1;
            continue;
        }
        let a = i;
        while i + 1 < n && vf[i + 1] < th.alpha_mps && vl[i + 1] < th.alpha_mps {
            i += 1;
        }
        let b = i;
        i += 1;
        if ((b - a) as f64) * dt < th.beta_s - 1e-9 {
            continue;
        }

        let mut slow = a;
        while slow > 0 && vf[slow - 1] < th.alpha_mps {
            slow -= 1;
        }
        let Some(stop) = (slow..n.saturating_sub(1)).find(|&k| vf[k] - vf[k + 1] < tol) else {
            continue;
        };
        let end = stop + tail;
        if end >= n || !(stop..=end).all(|k| vf[k] < th.alpha_mps) {
            continue;
        }
        if (stop..=end).any(|k| ep.states[k].g > th.delta_m) {
            continue;
        }

        let mut onset = stop;
        while onset > 0 && vf[onset - 1] + tol >= vf[onset] {
            onset -= 1;
        }
        let peak = vf[onset..=stop].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if let Some(k) = (onset..=stop).rev().find(|&k| vf[k] >= peak - tol) {
            onset = k;
        }
        if end - onset > max_len {
            onset = end - max_len;
        }
        if ((end - onset) as f64) * dt < th.gamma_min_s - 1e-9 {
            continue;
        }
        if out.iter().any(|s| s.end_index == end) {
            continue;
        }
        out.push(StopSegment {
            parent_id: ep.id(),
            follower_id: ep.follower_id.clone(),
            leader_id: ep.leader_id.clone(),
            follower_kind: ep.follower_kind,
            start_index: onset,
            end_index: end,
            start_t: ep.start_t + onset as f64 * dt,
            stop_onset_t: ep.start_t + stop as f64 * dt,
            dt,
            states: ep.states[onset..=end].to_vec(),
        });
    }
    out
}
