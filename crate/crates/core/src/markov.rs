//! Discretized car-following state space, smoothed transition matrix and
//! error-marginalized transition scoring.
//!
//! Counts are stored sparsely: `P[i][j] = (c_ij + eps) / (r_i + N eps)`
//! where `r_i` is the row total and `N` the number of bins, so the dense
//! 4096 x 4096 matrix is never materialized.

use crate::error_model::DerivedErrorSet;
use crate::extract::CfState;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use thiserror::Error;

type Counts = BTreeMap<(u32, u32), u64>;

pub const DEFAULT_SMOOTHING: f64 = 1e-6;
/// Bin masses below this are dropped when evaluating transition
/// probabilities.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MarkovError {
    #[error("state component {0} is not finite")]
    NonFinite(&'static str),
    #[error("segment needs at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("bin spec mismatch")]
    SpecMismatch,
    #[error("malformed matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Uniform half-open bins `[lo + k w, lo + (k+1) w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub width: f64,
    pub bins: usize,
}

impl Axis {
    pub fn hi(&self) -> f64 {
        self.lo + self.width * self.bins as f64
    }

    /// Bin of `x`, clamping out-of-range values into the edge bins. The
    /// flag reports whether clamping happened.
    pub fn bin(&self, x: f64) -> (usize, bool) {
        let k = ((x - self.lo) / self.width).floor();
        if k < 0.0 {
            (0, true)
        } else if k >= self.bins as f64 {
            (self.bins - 1, x > self.hi())
        } else {
            (k as usize, false)
        }
    }

    /// Gaussian mass of each bin for an observation `x` with error sd
    /// `sigma`; the edge bins extend to infinity.
    pub fn masses(&self, x: f64, sigma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.bins];
        if !(sigma > 0.0) {
            out[self.bin(x).0] = 1.0;
            return out;
        }
        let z = |edge: f64| (edge - x) / sigma;
        // Phi(b) - Phi(a) computed from whichever tail keeps precision
        let upper = |a: f64| 0.5 * erfc(a / std::f64::consts::SQRT_2);
        for (k, m) in out.iter_mut().enumerate() {
            let a = if k == 0 { f64::NEG_INFINITY } else { z(self.lo + k as f64 * self.width) };
            let b = if k + 1 == self.bins { f64::INFINITY } else { z(self.lo + (k + 1) as f64 * self.width) };
            *m = if a >= 0.0 {
                upper(a) - upper(b)
            } else {
                upper(-b) - upper(-a)
            };
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub dv: Axis,
    pub g: Axis,
    pub vf: Axis,
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec {
            dv: Axis { lo: -16.0, width: 2.0, bins: 16 },
            g: Axis { lo: 0.0, width: 1.0, bins: 32 },
            vf: Axis { lo: 0.0, width: 2.0, bins: 8 },
        }
    }
}

impl BinSpec {
    pub fn n_bins(&self) -> usize {
        self.dv.bins * self.g.bins * self.vf.bins
    }

    fn flat(&self, dv: usize, g: usize, vf: usize) -> usize {
        (dv * self.g.bins + g) * self.vf.bins + vf
    }

    /// Bin index (Δv-major, then g, then v_f) and whether any component
    /// was clamped.
    pub fn bin_index_clamped(&self, s: CfState) -> Result<(usize, bool), MarkovError> {
        for (name, x) in [("dv", s.dv), ("g", s.g), ("vf", s.vf)] {
            if !x.is_finite() {
                return Err(MarkovError::NonFinite(name));
            }
        }
        let (a, ca) = self.dv.bin(s.dv);
        let (b, cb) = self.g.bin(s.g);
        let (c, cc) = self.vf.bin(s.vf);
        Ok((self.flat(a, b, c), ca || cb || cc))
    }

    pub fn bin_index(&self, s: CfState) -> Result<usize, MarkovError> {
        self.bin_index_clamped(s).map(|(i, _)| i)
    }
}

/// Factorized bin distribution: `q[(a, b, c)] = dv[a] g[b] vf[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinDistribution {
    pub spec: BinSpec,
    pub dv: Vec<f64>,
    pub g: Vec<f64>,
    pub vf: Vec<f64>,
}

impl BinDistribution {
    pub fn mass(&self, index: usize) -> f64 {
        let nvf = self.spec.vf.bins;
        let ng = self.spec.g.bins;
        let c = index % nvf;
        let b = (index / nvf) % ng;
        let a = index / (nvf * ng);
        self.dv[a] * self.g[b] * self.vf[c]
    }

    pub fn total(&self) -> f64 {
        self.dv.iter().sum::<f64>() * self.g.iter().sum::<f64>() * self.vf.iter().sum::<f64>()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        (0..self.spec.n_bins()).map(|i| self.mass(i)).collect()
    }

    /// Bins whose mass exceeds `threshold`, in index order.
    pub fn support(&self, threshold: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for (a, &pa) in self.dv.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for (b, &pb) in self.g.iter().enumerate() {
                if pb == 0.0 {
                    continue;
                }
                for (c, &pc) in self.vf.iter().enumerate() {
                    let m = pa * pb * pc;
                    if m > threshold {
                        out.push((self.spec.flat(a, b, c), m));
                    }
                }
            }
        }
        out
    }
}

/// Independent Gaussian errors on Δv, g and v_f, centered on the
/// observation.
pub fn state_bin_distribution(obs: CfState, err: &DerivedErrorSet, spec: &BinSpec) -> BinDistribution {
    BinDistribution {
        spec: *spec,
        dv: spec.dv.masses(obs.dv, err.relative_speed_sd()),
        g: spec.g.masses(obs.g, err.spacing_sd()),
        vf: spec.vf.masses(obs.vf, err.speed_sd()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub spec: BinSpec,
    pub smoothing: f64,
    pub n_transitions: u64,
    /// Frames whose state was clamped into an edge bin.
    pub clamped_frames: u64,
    /// Sorted non-zero counts per row.
    rows: Vec<Vec<(u32, u64)>>,
    row_totals: Vec<u64>,
}

impl TransitionMatrix {
    pub fn from_counts(spec: BinSpec, smoothing: f64, counts: &BTreeMap<(u32, u32), u64>, clamped_frames: u64) -> Self {
        let n = spec.n_bins();
        let mut rows = vec![Vec::new(); n];
        let mut row_totals = vec![0u64; n];
        let mut total = 0;
        for (&(i, j), &c) in counts {
            rows[i as usize].push((j, c));
            row_totals[i as usize] += c;
            total += c;
        }
        TransitionMatrix {
            spec,
            smoothing,
            n_transitions: total,
            clamped_frames,
            rows,
            row_totals,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.spec.n_bins()
    }

    pub fn is_empty(&self) -> bool {
        self.n_transitions == 0
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        let row = &self.rows[i];
        row.binary_search_by_key(&(j as u32), |&(k, _)| k)
            .map(|p| row[p].1)
            .unwrap_or(0)
    }

    fn row_denominator(&self, i: usize) -> f64 {
        self.row_totals[i] as f64 + self.n_bins() as f64 * self.smoothing
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        (self.count(i, j) as f64 + self.smoothing) / self.row_denominator(i)
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        let listed: f64 = self.rows[i].iter().map(|&(_, c)| c as f64 + self.smoothing).sum();
        let unlisted = (self.n_bins() - self.rows[i].len()) as f64 * self.smoothing;
        (listed + unlisted) / self.row_denominator(i)
    }

    /// Non-zero counts as `(row, col, count)` in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, c)| (i, j as usize, c)))
    }
}

/// Counts consecutive-frame bin transitions over all segments and smooths
/// every cell by `smoothing`.
pub fn build_transition_matrix<'a, I>(segments: I, spec: &BinSpec, smoothing: f64) -> Result<TransitionMatrix, MarkovError>
where
    I: IntoIterator<Item = &'a [CfState]>,
{
    let segments: Vec<&[CfState]> = segments.into_iter().collect();
    let partial: Vec<(Counts, u64)> = segments
        .par_iter()
        .map(|seg| {
            let mut counts = BTreeMap::new();
            let mut clamped = 0;
            let mut prev: Option<usize> = None;
            for s in seg.iter() {
                let (idx, c) = spec.bin_index_clamped(*s)?;
                clamped += c as u64;
                if let Some(p) = prev {
                    *counts.entry((p as u32, idx as u32)).or_insert(0) += 1;
                }
                prev = Some(idx);
            }
            Ok((counts, clamped))
        })
        .collect::<Result<_, MarkovError>>()?;
    let mut counts = BTreeMap::new();
    let mut clamped = 0;
    for (c, k) in partial {
        for (key, v) in c {
            *counts.entry(key).or_insert(0) += v;
        }
        clamped += k;
    }
    Ok(TransitionMatrix::from_counts(*spec, smoothing, &counts, clamped))
}

/// `q_t^T P q_{t+1}`, summing over the support of `q_t` above
/// [`SUPPORT_THRESHOLD`].
pub fn transition_probability(q_t: &BinDistribution, q_t1: &BinDistribution, p: &TransitionMatrix) -> f64 {
    let n = p.n_bins() as f64;
    let next_total = q_t1.total();
    let mut acc = 0.0;
    for (i, qi) in q_t.support(SUPPORT_THRESHOLD) {
        let observed: f64 = p.rows[i].iter().map(|&(j, c)| c as f64 * q_t1.mass(j as usize)).sum();
        let inner = if p.row_totals[i] == 0 {
            next_total / n
        } else {
            (p.smoothing * next_total + observed) / p.row_denominator(i)
        };
        acc += qi * inner;
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    pub segment_id: String,
    pub geom_mean: f64,
    pub n_steps: usize,
    pub step_probs: Vec<f64>,
}

/// `exp(mean log P_t)` over the `n - 1` transitions of a segment.
pub fn geometric_mean_score(states: &[CfState], p: &TransitionMatrix, err: &DerivedErrorSet) -> Result<(f64, Vec<f64>), MarkovError> {
    if states.len() < 2 {
        return Err(MarkovError::TooShort(states.len()));
    }
    for s in states {
        p.spec.bin_index(*s)?;
    }
    let dists: Vec<BinDistribution> = states.iter().map(|s| state_bin_distribution(*s, err, &p.spec)).collect();
    let steps: Vec<f64> = dists.windows(2).map(|w| transition_probability(&w[0], &w[1], p)).collect();
    Ok((geometric_mean(&steps), steps))
}

pub fn geometric_mean(values: &[f64]) -> f64 {
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

/// Scores many segments in parallel; output order follows input order.
pub fn score_segments<'a, I>(segments: I, p: &TransitionMatrix, err: &DerivedErrorSet) -> Result<Vec<SegmentScore>, MarkovError>
where
    I: IntoIterator<Item = (String, &'a [CfState])>,
{
    let segments: Vec<(String, &[CfState])> = segments.into_iter().collect();
    segments
        .into_par_iter()
        .map(|(id, states)| {
            let (g, steps) = geometric_mean_score(states, p, err)?;
            Ok(SegmentScore {
                segment_id: id,
                geom_mean: g,
                n_steps: steps.len(),
                step_probs: steps,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    spec: BinSpec,
    smoothing: f64,
    n_transitions: u64,
    clamped_frames: u64,
}

/// Writes the matrix as a JSON header comment followed by
/// `row,col,count,prob` lines for every observed cell. Unlisted cells have
/// count zero.
pub fn write_matrix<W: Write>(p: &TransitionMatrix, mut w: W) -> Result<(), MarkovError> {
    let header = MatrixHeader {
        spec: p.spec,
        smoothing: p.smoothing,
        n_transitions: p.n_transitions,
        clamped_frames: p.clamped_frames,
    };
    writeln!(w, "# {}", serde_json::to_string(&header).map_err(|e| MarkovError::Format(e.to_string()))?)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["row", "col", "count", "prob"])?;
    for (i, j, c) in p.triplets() {
        out.write_record(&[i.to_string(), j.to_string(), c.to_string(), format!("{:e}", p.prob(i, j))])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix<R: BufRead>(mut r: R) -> Result<TransitionMatrix, MarkovError> {
    let mut first = String::new();
    r.read_line(&mut first)?;
    let json = first
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| MarkovError::Format("missing header line".into()))?;
    let header: MatrixHeader = serde_json::from_str(json.trim()).map_err(|e| MarkovError::Format(e.to_string()))?;
    let n = header.spec.n_bins();
    let mut counts = BTreeMap::new();
    let mut rd = csv::Reader::from_reader(r);
    for rec in rd.records() {
        let rec = rec?;
        let field = |k: usize| -> Result<u64, MarkovError> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| MarkovError::Format(format!("bad field {k} in {:?}", rec)))
        };
        let (i, j, c) = (field(0)?, field(1)?, field(2)?);
        if i as usize >= n || j as usize >= n {
            return Err(MarkovError::Format(format!("index out of range: {i},{j}")));
        }
        counts.insert((i as u32, j as u32), c);
    }
    let p = TransitionMatrix::from_counts(header.spec, header.smoothing, &counts, header.clamped_frames);
    if p.n_transitions != header.n_transitions {
        return Err(MarkovError::Format("transition count does not match header".into()));
    }
    Ok(p)
}

/// `segment_id,geom_mean,n_steps`.
pub fn write_scores<W: Write>(scores: &[SegmentScore], w: W) -> Result<(), MarkovError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["segment_id", "geom_mean", "n_steps"])?;
    for s in scores {
        out.write_record(&[s.segment_id.clone(), s.geom_mean.to_string(), s.n_steps.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// `segment_id,step,prob`.
pub fn write_step_probs<W: Write>(scores: &[SegmentScore], w: W) -> Result<(), MarkovError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["segment_id", "step", "prob"])?;
    for s in scores {
        for (k, p) in s.step_probs.iter().enumerate() {
            out.write_record(&[s.segment_id.clone(), k.to_string(), p.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error_model::{derive_error_set, ErrorModel2D, SpeedErrorSource};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn st(dv: f64, g: f64, vf: f64) -> CfState {
        CfState::new(g, dv, vf)
    }

    fn noisy() -> DerivedErrorSet {
        let pos = ErrorModel2D::new([0.0, 0.0], [0.5, 0.4], 0.1, 100).unwrap();
        let spd = ErrorModel2D::new([0.0, 0.0], [0.3, 0.2], 0.0, 100).unwrap();
        derive_error_set(&pos, SpeedErrorSource::Model(spd)).unwrap()
    }

    #[test]
    fn bin_indices() {
        let spec = BinSpec::default();
        assert_eq!(spec.n_bins(), 4096);
        assert_eq!(spec.bin_index(st(-16.0, 0.0, 0.0)).unwrap(), 0);
        assert_eq!(spec.bin_index_clamped(st(16.0, 32.0, 16.0)).unwrap(), (4095, false));
        assert_eq!(spec.bin_index_clamped(st(20.0, 40.0, 30.0)).unwrap(), (4095, true));
        assert_eq!(spec.bin_index(st(0.0, 10.5, 3.0)).unwrap(), 2129);
        assert!(spec.bin_index(st(f64::NAN, 1.0, 1.0)).is_err());
    }

    #[test]
    fn empty_matrix_is_uniform() {
        let p = build_transition_matrix(std::iter::empty(), &BinSpec::default(), DEFAULT_SMOOTHING).unwrap();
        assert!(p.is_empty());
        assert!((p.prob(17, 3000) - 1.0 / 4096.0).abs() < 1e-18);
        assert!((p.row_sum(5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_transition() {
        let seg = [st(0.0, 10.5, 3.0), st(0.0, 11.5, 3.0)];
        let p = build_transition_matrix([&seg[..]], &BinSpec::default(), DEFAULT_SMOOTHING).unwrap();
        let expected = (1.0 + 1e-6) / (1.0 + 4096.0 * 1e-6);
        assert!((p.prob(2129, 2137) - expected).abs() < 1e-15);
        assert!((expected - 0.99592).abs() < 1e-5);
        assert!((p.row_sum(2129) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_rows_are_stochastic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let segs: Vec<Vec<CfState>> = (0..20)
            .map(|_| (0..50).map(|_| st(rng.random_range(-10.0..10.0), rng.random_range(0.0..20.0), rng.random_range(0.0..10.0))).collect())
            .collect();
        let p = build_transition_matrix(segs.iter().map(|s| s.as_slice()), &BinSpec::default(), DEFAULT_SMOOTHING).unwrap();
        assert_eq!(p.n_transitions, 20 * 49);
        for i in 0..p.n_bins() {
            assert!((p.row_sum(i) - 1.0).abs() < 1e-9);
        }
        let dense: f64 = (0..4096).map(|j| p.prob(2000, j)).sum();
        assert!((dense - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bin_masses() {
        let zero = DerivedErrorSet::zero();
        let spec = BinSpec::default();
        let q = state_bin_distribution(st(0.0, 10.5, 3.0), &zero, &spec);
        assert_eq!(q.support(0.0), vec![(2129, 1.0)]);

        let g = spec.g.masses(10.5, 0.25);
        assert!((g[10] - 0.954_499_736_103_642).abs() < 1e-10, "{}", g[10]);
        let corner = state_bin_distribution(st(-16.0, 0.0, 0.0), &noisy(), &spec);
        assert!((corner.total() - 1.0).abs() < 1e-12);
        assert!(corner.dv[0] > 0.5 && corner.g[0] > 0.5);
        let wide = spec.g.masses(-3.0, 20.0);
        assert!((wide.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn dense_bilinear(q0: &BinDistribution, q1: &BinDistribution, p: &TransitionMatrix) -> f64 {
        let a = q0.to_dense();
        let b = q1.to_dense();
        let mut acc = 0.0;
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for (j, &bj) in b.iter().enumerate() {
                row += p.prob(i, j) * bj;
            }
            acc += ai * row;
        }
        acc
    }

    #[test]
    fn one_hot_and_uniform_cases() {
        let seg = [st(0.0, 10.5, 3.0), st(2.0, 11.5, 3.0), st(2.0, 11.5, 5.0)];
        let spec = BinSpec::default();
        let p = build_transition_matrix([&seg[..]], &spec, DEFAULT_SMOOTHING).unwrap();
        let zero = DerivedErrorSet::zero();
        let q0 = state_bin_distribution(seg[0], &zero, &spec);
        let q1 = state_bin_distribution(seg[1], &zero, &spec);
        let i = spec.bin_index(seg[0]).unwrap();
        let j = spec.bin_index(seg[1]).unwrap();
        assert!((transition_probability(&q0, &q1, &p) - p.prob(i, j)).abs() < 1e-15);

        let empty = build_transition_matrix(std::iter::empty(), &spec, DEFAULT_SMOOTHING).unwrap();
        let uniform = BinDistribution {
            spec,
            dv: vec![1.0 / 16.0; 16],
            g: vec![1.0 / 32.0; 32],
            vf: vec![1.0 / 8.0; 8],
        };
        assert!((transition_probability(&uniform, &uniform, &empty) - 1.0 / 4096.0).abs() < 1e-15);
    }

    #[test]
    fn sparse_matches_dense() {
        let spec = BinSpec::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let seg: Vec<CfState> = (0..400)
            .map(|k| st(((k % 7) as f64 - 3.0) * 0.9, 8.0 + (k % 5) as f64 * 0.7, 4.0 + (k % 3) as f64))
            .collect();
        let p = build_transition_matrix([&seg[..]], &spec, DEFAULT_SMOOTHING).unwrap();
        let err = noisy();
        for _ in 0..5 {
            let a = st(rng.random_range(-3.0..3.0), rng.random_range(8.0..11.0), rng.random_range(4.0..6.0));
            let b = st(rng.random_range(-3.0..3.0), rng.random_range(8.0..11.0), rng.random_range(4.0..6.0));
            let qa = state_bin_distribution(a, &err, &spec);
            let qb = state_bin_distribution(b, &err, &spec);
            let fast = transition_probability(&qa, &qb, &p);
            let slow = dense_bilinear(&qa, &qb, &p);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
        // three-bin supported vectors
        let mut q = BinDistribution {
            spec,
            dv: vec![0.0; 16],
            g: vec![0.0; 32],
            vf: vec![0.0; 8],
        };
        q.dv[7] = 1.0;
        q.g[8] = 0.2;
        q.g[9] = 0.5;
        q.g[10] = 0.3;
        q.vf[2] = 1.0;
        assert!((transition_probability(&q, &q, &p) - dense_bilinear(&q, &q, &p)).abs() < 1e-12);
    }

    #[test]
    fn geometric_mean_cases() {
        assert!((geometric_mean(&[0.9, 0.4]) - 0.6).abs() < 1e-15);
        assert!((geometric_mean(&[0.3; 7]) - 0.3).abs() < 1e-15);
        let spec = BinSpec::default();
        let p = build_transition_matrix(std::iter::empty(), &spec, DEFAULT_SMOOTHING).unwrap();
        assert!(matches!(geometric_mean_score(&[st(0.0, 1.0, 1.0)], &p, &DerivedErrorSet::zero()), Err(MarkovError::TooShort(1))));
    }

    #[test]
    fn zero_error_reduces_to_plug_in() {
        let spec = BinSpec::default();
        let train: Vec<CfState> = (0..60).map(|k| st(-(k as f64) * 0.2, 20.0 - k as f64 * 0.3, 12.0 - k as f64 * 0.2)).collect();
        let p = build_transition_matrix([&train[..]], &spec, DEFAULT_SMOOTHING).unwrap();
        let test: Vec<CfState> = train.iter().step_by(2).copied().collect();
        let (score, steps) = geometric_mean_score(&test, &p, &DerivedErrorSet::zero()).unwrap();
        let idx: Vec<usize> = test.iter().map(|s| spec.bin_index(*s).unwrap()).collect();
        let plug: Vec<f64> = idx.windows(2).map(|w| p.prob(w[0], w[1])).collect();
        for (a, b) in steps.iter().zip(&plug) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((score - geometric_mean(&plug)).abs() < 1e-12);
        assert!(score > 0.0 && score <= 1.0);
    }

    #[test]
    fn scoring_is_directional() {
        let spec = BinSpec::default();
        let train: Vec<CfState> = (0..80).map(|k| st(-2.0, 30.0 - k as f64 * 0.35, 14.0 - k as f64 * 0.17)).collect();
        let p = build_transition_matrix([&train[..]], &spec, DEFAULT_SMOOTHING).unwrap();
        let fwd = geometric_mean_score(&train, &p, &noisy()).unwrap().0;
        let rev: Vec<CfState> = train.iter().rev().copied().collect();
        let back = geometric_mean_score(&rev, &p, &noisy()).unwrap().0;
        assert!(fwd > back, "{fwd} {back}");
    }

    #[test]
    fn matrix_file_round_trip() {
        let seg = [st(0.0, 10.5, 3.0), st(2.0, 11.5, 3.0), st(2.0, 11.5, 5.0), st(40.0, 1.0, 1.0)];
        let p = build_transition_matrix([&seg[..]], &BinSpec::default(), DEFAULT_SMOOTHING).unwrap();
        assert_eq!(p.clamped_frames, 1);
        let mut buf = Vec::new();
        write_matrix(&p, &mut buf).unwrap();
        let back = read_matrix(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, p);
        assert!(read_matrix(std::io::Cursor::new(b"row,col\n".to_vec())).is_err());
    }

    proptest! {
        #[test]
        fn distribution_sums_to_one(dv in -30.0..30.0f64, g in -5.0..50.0f64, vf in -2.0..25.0f64, s in 0.0..5.0f64) {
            let pos = ErrorModel2D::new([0.0, 0.0], [s, s], 0.0, 10).unwrap();
            let err = derive_error_set(&pos, SpeedErrorSource::Model(pos)).unwrap();
            let q = state_bin_distribution(st(dv, g, vf), &err, &BinSpec::default());
            prop_assert!((q.total() - 1.0).abs() < 1e-9);
            prop_assert!(q.dv.iter().chain(&q.g).chain(&q.vf).all(|m| *m >= 0.0));
        }
    }
}
