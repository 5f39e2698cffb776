//! Weighted multivariate dynamic time warping.
//!
//! The local cost between frames is the weighted Euclidean norm
//! `sqrt(sum_c w_c (a_c - b_c)^2)`. The distance is the square root of the
//! minimal summed local cost over all admissible warping paths, so its
//! magnitude differs from the usual un-rooted DTW. `DTW* = DTW / K`
//! normalizes by the length of the optimal path.

use crate::series::MultiSeries;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DtwError {
    #[error("series must be non-empty")]
    Empty,
    #[error("channel mismatch: {a} vs {b}")]
    ChannelMismatch { a: usize, b: usize },
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("weights must be positive and finite")]
    BadWeight,
    #[error("band half-width {band} cannot connect lengths {m} and {n}")]
    InfeasibleBand { m: usize, n: usize, band: usize },
    #[error("channel {0} has zero pooled variance")]
    DegenerateChannel(usize),
    #[error("need at least 2 frames to pool variances, got {0}")]
    TooFewFrames(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtwConfig {
    /// Diagonal of the inverse-variance weight matrix, one per channel.
    pub weights: Vec<f64>,
    /// Sakoe–Chiba half-width in frames; `None` leaves the path
    /// unconstrained.
    pub band: Option<usize>,
    pub normalize: bool,
}

impl DtwConfig {
    pub fn unit(channels: usize) -> Self {
        DtwConfig {
            weights: vec![1.0; channels],
            band: None,
            normalize: true,
        }
    }

    pub fn with_band(mut self, band: Option<usize>) -> Self {
        self.band = band;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtwResult {
    /// Square root of the minimal summed local cost.
    pub distance: f64,
    /// Number of index pairs on the optimal path.
    pub path_length: usize,
    /// Zero-based index pairs from (0, 0) to (m-1, n-1).
    pub path: Vec<(usize, usize)>,
}

impl DtwResult {
    pub fn normalized(&self) -> f64 {
        self.distance / self.path_length as f64
    }
}

/// Inverse pooled variance per channel over every frame of every episode.
/// Variances use the `N - 1` denominator.
pub fn pooled_weights<'a, I>(episodes: I) -> Result<Vec<f64>, DtwError>
where
    I: IntoIterator<Item = &'a MultiSeries>,
{
    pooled_variances(episodes)?
        .into_iter()
        .enumerate()
        .map(|(k, v)| v.map(|v| 1.0 / v).ok_or(DtwError::DegenerateChannel(k)))
        .collect()
}

/// Pooled variance per channel; `None` for channels that are constant to
/// rounding.
pub fn pooled_variances<'a, I>(episodes: I) -> Result<Vec<Option<f64>>, DtwError>
where
    I: IntoIterator<Item = &'a MultiSeries>,
{
    let mut channels = None;
    let mut count = 0usize;
    let mut sum: Vec<f64> = Vec::new();
    let mut sumsq: Vec<f64> = Vec::new();
    let mut shift: Vec<f64> = Vec::new();
    for ep in episodes {
        let c = *channels.get_or_insert(ep.channels());
        if c != ep.channels() {
            return Err(DtwError::ChannelMismatch {
                a: c,
                b: ep.channels(),
            });
        }
        for frame in ep.frames() {
            if shift.is_empty() {
                // shifted sums keep the one-pass variance well conditioned
                shift = frame.to_vec();
                sum = vec![0.0; c];
                sumsq = vec![0.0; c];
            }
            for k in 0..c {
                let d = frame[k] - shift[k];
                sum[k] += d;
                sumsq[k] += d * d;
            }
            count += 1;
        }
    }
    if count < 2 {
        return Err(DtwError::TooFewFrames(count));
    }
    let n = count as f64;
    Ok(sum
        .iter()
        .zip(&sumsq)
        .map(|(&s, &ss)| {
            let var = (ss - s * s / n) / (n - 1.0);
            (var > 1e-12 * (ss / n).max(f64::MIN_POSITIVE) && var > 0.0).then_some(var)
        })
        .collect())
}

fn check_inputs(a: &MultiSeries, b: &MultiSeries, cfg: &DtwConfig) -> Result<(), DtwError> {
    if a.is_empty() || b.is_empty() {
        return Err(DtwError::Empty);
    }
    if a.channels() != b.channels() {
        return Err(DtwError::ChannelMismatch {
            a: a.channels(),
            b: b.channels(),
        });
    }
    if cfg.weights.len() != a.channels() {
        return Err(DtwError::WeightCount {
            expected: a.channels(),
            got: cfg.weights.len(),
        });
    }
    if !cfg.weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
        return Err(DtwError::BadWeight);
    }
    if let Some(band) = cfg.band {
        let (m, n) = (a.len(), b.len());
        if m.abs_diff(n) > band {
            return Err(DtwError::InfeasibleBand { m, n, band });
        }
    }
    Ok(())
}

#[inline]
pub fn local_cost(a: &[f64], b: &[f64], weights: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(weights)
        .map(|((x, y), w)| w * (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Cumulative cost matrix, row-major `m x n`; cells outside the band hold
/// infinity.
fn cumulative(a: &MultiSeries, b: &MultiSeries, cfg: &DtwConfig) -> Vec<f64> {
    let (m, n) = (a.len(), b.len());
    let band = cfg.band.unwrap_or(usize::MAX);
    let mut acc = vec![f64::INFINITY; m * n];
    for i in 0..m {
        let ai = a.frame(i);
        let lo = i.saturating_sub(band);
        let hi = i.saturating_add(band).min(n - 1);
        for j in lo..=hi {
            let d = local_cost(ai, b.frame(j), &cfg.weights);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * n + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * n + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * n + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * n + j] = d + prev;
        }
    }
    acc
}

/// Exact banded DTW with the optimal path. Ties during backtracking prefer
/// the diagonal step, then the step that advances only `a`, then the step
/// that advances only `b`.
pub fn dtw_distance(a: &MultiSeries, b: &MultiSeries, cfg: &DtwConfig) -> Result<DtwResult, DtwError> {
    check_inputs(a, b, cfg)?;
    let (m, n) = (a.len(), b.len());
    let acc = cumulative(a, b, cfg);
    let total = acc[m * n - 1];
    let mut path = Vec::with_capacity(m + n);
    let (mut i, mut j) = (m - 1, n - 1);
    path.push((i, j));
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[(i - 1) * n + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { acc[(i - 1) * n + j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i * n + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult {
        distance: total.sqrt(),
        path_length: path.len(),
        path,
    })
}

/// `DTW / K`, or the raw distance when `cfg.normalize` is false.
pub fn normalized_dtw(a: &MultiSeries, b: &MultiSeries, cfg: &DtwConfig) -> Result<f64, DtwError> {
    let r = dtw_distance(a, b, cfg)?;
    Ok(if cfg.normalize { r.normalized() } else { r.distance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub a: usize,
    pub b: usize,
    pub dtw: f64,
    pub dtw_star: f64,
    pub path_length: usize,
}

fn pair(a: &[MultiSeries], b: &[MultiSeries], i: usize, j: usize, cfg: &DtwConfig) -> Result<PairDistance, DtwError> {
    let r = dtw_distance(&a[i], &b[j], cfg)?;
    Ok(PairDistance {
        a: i,
        b: j,
        dtw: r.distance,
        dtw_star: r.normalized(),
        path_length: r.path_length,
    })
}

/// All `a x b` pairs, in row-major order.
pub fn cross_distances(a: &[MultiSeries], b: &[MultiSeries], cfg: &DtwConfig) -> Result<Vec<PairDistance>, DtwError> {
    let jobs: Vec<(usize, usize)> = (0..a.len()).flat_map(|i| (0..b.len()).map(move |j| (i, j))).collect();
    jobs.par_iter().map(|&(i, j)| pair(a, b, i, j, cfg)).collect()
}

/// All unordered pairs `i < j` within one collection.
pub fn within_distances(items: &[MultiSeries], cfg: &DtwConfig) -> Result<Vec<PairDistance>, DtwError> {
    let jobs: Vec<(usize, usize)> = (0..items.len())
        .flat_map(|i| (i + 1..items.len()).map(move |j| (i, j)))
        .collect();
    jobs.par_iter().map(|&(i, j)| pair(items, items, i, j, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[f64]) -> MultiSeries {
        MultiSeries::scalar(v)
    }

    #[test]
    fn identical_series() {
        let a = MultiSeries::from_frames(&[[1.0, 2.0], [3.0, 1.0], [0.0, 0.5], [2.0, 2.0]]);
        let r = dtw_distance(&a, &a, &DtwConfig::unit(2)).unwrap();
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.path_length, 4);
        assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(normalized_dtw(&a, &a, &DtwConfig::unit(2)).unwrap(), 0.0);
    }

    #[test]
    fn small_scalar_case() {
        let r = dtw_distance(&s(&[0.0, 1.0, 2.0]), &s(&[0.0, 2.0]), &DtwConfig::unit(1)).unwrap();
        assert!((r.distance - 1.0).abs() < 1e-15);
        assert_eq!(r.path_length, 3);
        // from (2, 1) the diagonal (1, 0) ties with (1, 1) and wins
        assert_eq!(r.path, vec![(0, 0), (1, 0), (2, 1)]);
        let star = normalized_dtw(&s(&[0.0, 1.0, 2.0]), &s(&[0.0, 2.0]), &DtwConfig::unit(1)).unwrap();
        assert!((star - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weights_scale_channels() {
        let a = MultiSeries::from_frames(&[[0.0, 0.0]]);
        let b = MultiSeries::from_frames(&[[1.0, 2.0]]);
        let cfg = DtwConfig {
            weights: vec![4.0, 0.25],
            band: None,
            normalize: false,
        };
        // local cost sqrt(4 + 1) and the distance is its square root
        let d = normalized_dtw(&a, &b, &cfg).unwrap();
        assert!((d - 5f64.sqrt().sqrt()).abs() < 1e-15);
    }

    #[test]
    fn input_errors() {
        let a = MultiSeries::from_frames(&[[0.0, 0.0]]);
        let b = s(&[1.0]);
        assert!(matches!(
            dtw_distance(&a, &b, &DtwConfig::unit(2)),
            Err(DtwError::ChannelMismatch { .. })
        ));
        let cfg = DtwConfig::unit(1).with_band(Some(1));
        assert!(matches!(
            dtw_distance(&s(&[0.0, 1.0, 2.0, 3.0]), &s(&[0.0, 1.0]), &cfg),
            Err(DtwError::InfeasibleBand { m: 4, n: 2, band: 1 })
        ));
        assert!(matches!(dtw_distance(&s(&[]), &s(&[1.0]), &DtwConfig::unit(1)), Err(DtwError::Empty)));
        let bad = DtwConfig {
            weights: vec![0.0],
            band: None,
            normalize: true,
        };
        assert!(matches!(dtw_distance(&b, &b, &bad), Err(DtwError::BadWeight)));
    }

    #[test]
    fn pooled_weights_from_known_variances() {
        // channel 0 values {-2, 2} pattern, variance computed with N - 1
        let frames: Vec<[f64; 3]> = (0..8)
            .map(|k| {
                let sgn = if k % 2 == 0 { 1.0 } else { -1.0 };
                [10.0 + 2.0 * sgn, -3.0 + sgn, 0.5 * sgn]
            })
            .collect();
        let ep = MultiSeries::from_frames(&frames);
        // oracle: two-pass sample variance
        let var = |c: usize| {
            let v: Vec<f64> = ep.channel(c).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let w = pooled_weights([&ep]).unwrap();
        for c in 0..3 {
            assert!((w[c] - 1.0 / var(c)).abs() < 1e-12 * w[c]);
        }
        let ratio = [w[0] / w[1], w[2] / w[1]];
        assert!((ratio[0] - 0.25).abs() < 1e-12 && (ratio[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_weights_degenerate() {
        let ep = MultiSeries::from_frames(&[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]);
        assert_eq!(pooled_weights([&ep]), Err(DtwError::DegenerateChannel(1)));
        let one = MultiSeries::from_frames(&[[1.0, 5.0]]);
        assert_eq!(pooled_weights([&one]), Err(DtwError::TooFewFrames(1)));
    }

    #[test]
    fn pairwise_layout() {
        let items = vec![s(&[0.0, 1.0]), s(&[1.0, 2.0]), s(&[5.0])];
        let w = within_distances(&items, &DtwConfig::unit(1)).unwrap();
        assert_eq!(w.iter().map(|p| (p.a, p.b)).collect::<Vec<_>>(), vec![(0, 1), (0, 2), (1, 2)]);
        let c = cross_distances(&items[..1], &items, &DtwConfig::unit(1)).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[0].dtw, 0.0);
    }
}
