/// Location of a point relative to a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the foot point. Points beyond either end are
    /// projected onto the extension of the end segment, so `s` may be
    /// negative or exceed the polyline length.
    pub s: f64,
    /// Signed perpendicular offset, positive to the left of travel.
    pub offset: f64,
    /// Euclidean distance to the (non-extended) polyline.
    pub distance: f64,
}

pub fn project_onto_polyline(p: [f64; 2], line: &[[f64; 2]]) -> Projection {
    debug_assert!(line.len() >= 2);
    let last_seg = line.len() - 2;
    let mut best: Option<(f64, Projection)> = None;
    let mut s_start = 0.0;
    for (k, w) in line.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        let len2 = dx * dx + dy * dy;
        if len2 == 0.0 {
            continue;
        }
        let len = len2.sqrt();
        let px = p[0] - a[0];
        let py = p[1] - a[1];
        let raw = (px * dx + py * dy) / len2;
        let clamped = raw.clamp(0.0, 1.0);
        let cx = a[0] + clamped * dx - p[0];
        let cy = a[1] + clamped * dy - p[1];
        let distance = (cx * cx + cy * cy).sqrt();
        // extrapolate only along the first and last segments
        let along = if (k == 0 && raw < 0.0) || (k == last_seg && raw > 1.0) {
            raw
        } else {
            clamped
        };
        let offset = (dx * py - dy * px) / len;
        let proj = Projection {
            s: s_start + along * len,
            offset,
            distance,
        };
        if best.is_none_or(|(d, _)| distance < d) {
            best = Some((distance, proj));
        }
        s_start += len;
    }
    best.map(|(_, p)| p).unwrap_or(Projection {
        s: 0.0,
        offset: 0.0,
        distance: ((p[0] - line[0][0]).powi(2) + (p[1] - line[0][1]).powi(2)).sqrt(),
    })
}
