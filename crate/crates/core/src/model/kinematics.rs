use super::{Frame, ModelError, Trajectory, TIME_EPS};
use std::f64::consts::PI;

const MIN_DISPLACEMENT: f64 = 1e-6;

fn check_dt(dt: f64) -> Result<(), ModelError> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(ModelError::BadDt(dt))
    }
}

fn too_short(traj: &Trajectory) -> ModelError {
    ModelError::TooShort {
        id: traj.vehicle_id.clone(),
        needed: 2,
        have: traj.len(),
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + (b - a) * w
}

fn lerp_opt(a: Option<f64>, b: Option<f64>, w: f64) -> Option<f64> {
    Some(lerp(a?, b?, w))
}

fn lerp_angle(a: Option<f64>, b: Option<f64>, w: f64) -> Option<f64> {
    let (a, b) = (a?, b?);
    Some(wrap_angle(a + wrap_angle(b - a) * w))
}

/// Resamples onto the grid `t0, t0 + dt, ...` without extrapolating past
/// the last original sample. Positions (and speed/heading when present)
/// are interpolated linearly; lane ids are carried from the preceding
/// sample. Grid times that coincide with an original sample copy it.
pub fn resample_uniform(traj: &Trajectory, dt: f64) -> Result<Trajectory, ModelError> {
    check_dt(dt)?;
    if traj.len() < 2 {
        return Err(too_short(traj));
    }
    let t0 = traj.start_t();
    let t_end = traj.end_t();
    let count = ((t_end - t0) / dt + TIME_EPS).floor() as usize + 1;
    let mut frames = Vec::with_capacity(count);
    let mut seg = 0;
    let src = &traj.frames;
    for k in 0..count {
        let t = t0 + k as f64 * dt;
        while seg + 2 < src.len() && src[seg + 1].t <= t + TIME_EPS {
            seg += 1;
        }
        let (a, b) = (&src[seg], &src[seg + 1]);
        if (a.t - t).abs() <= TIME_EPS {
            frames.push(Frame { t, ..a.clone() });
            continue;
        }
        if (b.t - t).abs() <= TIME_EPS {
            frames.push(Frame { t, ..b.clone() });
            continue;
        }
        let w = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        frames.push(Frame {
            t,
            x: lerp(a.x, b.x, w),
            y: lerp(a.y, b.y, w),
            v: lerp_opt(a.v, b.v, w),
            heading: lerp_angle(a.heading, b.heading, w),
            lane_id: a.lane_id.clone(),
        });
    }
    Ok(Trajectory {
        frames,
        ..traj.clone()
    })
}

/// Fills speed and heading from positions.
///
/// Speed is the central difference of cumulative arc length (one-sided at
/// the ends). Heading is the direction of the same displacement; when the
/// displacement is below 1e-6 m the previous heading is held.
pub fn derive_kinematics(traj: &Trajectory) -> Result<Trajectory, ModelError> {
    let n = traj.len();
    if n < 2 {
        return Err(too_short(traj));
    }
    let f = &traj.frames;
    let mut arc = Vec::with_capacity(n);
    arc.push(0.0);
    for w in f.windows(2) {
        let d = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
        arc.push(arc[arc.len() - 1] + d);
    }
    let span = |i: usize| -> (usize, usize) {
        if i == 0 {
            (0, 1)
        } else if i == n - 1 {
            (n - 2, n - 1)
        } else {
            (i - 1, i + 1)
        }
    };
    let raw_heading: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let (a, b) = span(i);
            let dx = f[b].x - f[a].x;
            let dy = f[b].y - f[a].y;
            ((dx * dx + dy * dy).sqrt() >= MIN_DISPLACEMENT).then(|| wrap_angle(dy.atan2(dx)))
        })
        .collect();
    // seed for a stationary start: recorded heading, else first moving one
    let mut held = f[0]
        .heading
        .or_else(|| raw_heading.iter().flatten().next().copied())
        .unwrap_or(0.0);
    let frames = (0..n)
        .map(|i| {
            let (a, b) = span(i);
            let v = (arc[b] - arc[a]) / (f[b].t - f[a].t);
            if let Some(h) = raw_heading[i] {
                held = h;
            }
            Frame {
                v: Some(v),
                heading: Some(held),
                ..f[i].clone()
            }
        })
        .collect();
    Ok(Trajectory {
        frames,
        ..traj.clone()
    })
}

/// Longitudinal acceleration by central differences of speed.
pub fn accelerations(traj: &Trajectory) -> Vec<f64> {
    let n = traj.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let f = &traj.frames;
    (0..n)
        .map(|i| {
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i == n - 1 {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            (traj.speed(b) - traj.speed(a)) / (f[b].t - f[a].t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VehicleKind;
    use proptest::prelude::*;

    fn traj(points: &[(f64, f64, f64)]) -> Trajectory {
        let frames = points.iter().map(|&(t, x, y)| Frame::new(t, x, y)).collect();
        Trajectory::new("v", VehicleKind::Hv, 4.5, 1.8, frames).unwrap()
    }

    #[test]
    fn two_frames_to_eleven() {
        let r = resample_uniform(&traj(&[(0.0, 0.0, 0.0), (1.0, 1.0, 0.0)]), 0.1).unwrap();
        assert_eq!(r.len(), 11);
        for (k, f) in r.frames.iter().enumerate() {
            assert!((f.x - 0.1 * k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn thirty_fps_to_ten_hz() {
        let pts: Vec<_> = (0..=90)
            .map(|k| {
                let t = k as f64 / 30.0;
                (t, 3.0 + 10.0 * t, 1.0)
            })
            .collect();
        let r = resample_uniform(&traj(&pts), 0.1).unwrap();
        assert_eq!(r.len(), 31);
        for (k, f) in r.frames.iter().enumerate() {
            assert!((f.x - (3.0 + 10.0 * k as f64 * 0.1)).abs() < 1e-9);
            assert!((f.t - k as f64 * 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn piecewise_linear_matches_segment_formula() {
        let pts = [
            (0.0, 0.0, 0.0),
            (0.37, 2.0, 1.0),
            (0.81, 2.5, -1.0),
            (1.3, 7.0, 0.5),
        ];
        let r = resample_uniform(&traj(&pts), 0.1).unwrap();
        assert_eq!(r.len(), 14);
        for f in &r.frames {
            // oracle: locate the segment by linear search and apply the
            // two-point formula directly
            let k = (0..pts.len() - 1)
                .find(|&k| f.t >= pts[k].0 - 1e-12 && f.t <= pts[k + 1].0 + 1e-12)
                .unwrap();
            let (ta, xa, ya) = pts[k];
            let (tb, xb, yb) = pts[k + 1];
            let ex = xa + (xb - xa) * (f.t - ta) / (tb - ta);
            let ey = ya + (yb - ya) * (f.t - ta) / (tb - ta);
            assert!((f.x - ex).abs() < 1e-12, "{} vs {}", f.x, ex);
            assert!((f.y - ey).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_requires_two_frames() {
        assert!(matches!(
            resample_uniform(&traj(&[(0.0, 0.0, 0.0)]), 0.1),
            Err(ModelError::TooShort { .. })
        ));
        assert!(matches!(
            resample_uniform(&traj(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)]), 0.0),
            Err(ModelError::BadDt(_))
        ));
    }

    #[test]
    fn constant_speed_gives_constant_v() {
        let pts: Vec<_> = (0..20).map(|k| (k as f64 * 0.1, 0.5 * k as f64, 0.0)).collect();
        let d = derive_kinematics(&traj(&pts)).unwrap();
        for i in 0..d.len() {
            assert!((d.speed(i) - 5.0).abs() < 1e-9);
            assert!(d.heading(i).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_vehicle() {
        let pts: Vec<_> = (0..10).map(|k| (k as f64 * 0.1, 4.0, 2.0)).collect();
        let d = derive_kinematics(&traj(&pts)).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.speed(i), 0.0);
            assert_eq!(d.heading(i), d.heading(0));
        }
    }

    #[test]
    fn quadratic_interior_speed_is_exact() {
        let pts: Vec<_> = (0..30)
            .map(|k| {
                let t = k as f64 * 0.1;
                (t, t * t, 0.0)
            })
            .collect();
        let d = derive_kinematics(&traj(&pts)).unwrap();
        for i in 1..d.len() - 1 {
            let t = d.frames[i].t;
            assert!((d.speed(i) - 2.0 * t).abs() < 1e-9, "frame {i}");
        }
    }

    #[test]
    fn heading_held_through_pause() {
        let pts = [
            (0.0, 0.0, 0.0),
            (0.1, 0.0, 1.0),
            (0.2, 0.0, 2.0),
            (0.3, 0.0, 2.0),
            (0.4, 0.0, 2.0),
            (0.5, 0.0, 2.0),
        ];
        let d = derive_kinematics(&traj(&pts)).unwrap();
        for i in 0..d.len() {
            assert!((d.heading(i) - PI / 2.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn resample_is_idempotent(steps in prop::collection::vec((0.01f64..0.5, -3.0f64..3.0, -1.0f64..1.0), 2..30)) {
            let mut t = 0.0;
            let mut pts = vec![(0.0, 0.0, 0.0)];
            for (dt, dx, dy) in steps {
                t += dt;
                let (_, x, y) = pts[pts.len() - 1];
                pts.push((t, x + dx, y + dy));
            }
            let once = resample_uniform(&traj(&pts), 0.1);
            if let Ok(once) = once {
                if once.len() >= 2 {
                    let twice = resample_uniform(&once, 0.1).unwrap();
                    prop_assert_eq!(once, twice);
                }
            }
        }

        #[test]
        fn kinematics_are_finite_and_nonnegative(pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..40)) {
            let pts: Vec<_> = pts.iter().enumerate().map(|(k, &(x, y))| (k as f64 * 0.1, x, y)).collect();
            let d = derive_kinematics(&traj(&pts)).unwrap();
            for i in 0..d.len() {
                prop_assert!(d.speed(i) >= 0.0 && d.speed(i).is_finite());
                let h = d.heading(i);
                prop_assert!(h.is_finite() && h > -PI && h <= PI);
            }
        }
    }
}
