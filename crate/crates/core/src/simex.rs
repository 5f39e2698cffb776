//! Simulation-extrapolation of DTW distances under measurement error.
//!
//! For each `λ` in the grid, `B` pseudo-episode pairs are built by adding
//! `sqrt(λ)` times fresh error draws to the error-bearing series; the mean
//! `DTW*` over replicates gives `T(λ)`. A quadratic in `λ` fitted to the
//! table is evaluated at `λ = -1`.

use crate::dtw::{dtw_distance, DtwConfig, DtwError};
use crate::error_model::{speed_error_samples, DerivedErrorSet, ErrorModelError, ErrorSamples};
use crate::rng::{stream, StreamRng};
use crate::series::MultiSeries;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimexError {
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("need at least 3 distinct lambda values, got {0}")]
    Rank(usize),
    #[error("lambda grid must contain 0")]
    NoZero,
    #[error("replicate count must be at least 1")]
    NoReplicates,
    #[error("{rules} noise rules for {channels} channels")]
    RuleCount { rules: usize, channels: usize },
    #[error("every replicate at lambda {0} was non-finite")]
    AllRejected(f64),
    #[error(transparent)]
    Dtw(#[from] DtwError),
    #[error(transparent)]
    ErrorModel(#[from] ErrorModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    X,
    Y,
}

impl Component {
    fn index(self) -> usize {
        match self {
            Component::X => 0,
            Component::Y => 1,
        }
    }
}

/// How measurement error enters one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "component")]
pub enum NoiseRule {
    Exact,
    /// One position error.
    Position(Component),
    /// Difference of two independent position errors.
    PositionDiff(Component),
    Speed(Component),
    SpeedDiff(Component),
}

/// Rules for car-following channels (g, dv, vf).
pub const CF_RULES: [NoiseRule; 3] = [
    NoiseRule::PositionDiff(Component::X),
    NoiseRule::SpeedDiff(Component::X),
    NoiseRule::Speed(Component::X),
];

/// Rules for lane-change channels (dx, dy, g_lead, g_lag, dv_lead, dv_lag).
pub const LC_RULES: [NoiseRule; 6] = [
    NoiseRule::Position(Component::X),
    NoiseRule::Position(Component::Y),
    NoiseRule::PositionDiff(Component::X),
    NoiseRule::PositionDiff(Component::X),
    NoiseRule::SpeedDiff(Component::X),
    NoiseRule::SpeedDiff(Component::X),
];

/// Source of measurement-error draws. Channels are drawn independently.
#[derive(Debug, Clone, PartialEq)]
pub enum ErrorGenerator {
    /// Zero-mean Gaussian with the fitted standard deviations.
    Gaussian(DerivedErrorSet),
    /// Resamples centered empirical errors. Speed errors come from the
    /// samples' durations when available, otherwise from the Gaussian
    /// speed model in `fallback`.
    Empirical {
        position: Vec<[f64; 2]>,
        speed: Option<Vec<[f64; 2]>>,
        fallback: DerivedErrorSet,
    },
}

fn centered(samples: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s[0]).sum::<f64>() / n;
    let my = samples.iter().map(|s| s[1]).sum::<f64>() / n;
    samples.iter().map(|s| [s[0] - mx, s[1] - my]).collect()
}

impl ErrorGenerator {
    pub fn empirical(samples: &ErrorSamples, fallback: DerivedErrorSet) -> Result<Self, SimexError> {
        if samples.errors.is_empty() {
            return Err(ErrorModelError::TooFewSamples { needed: 1, have: 0 }.into());
        }
        let speed = match &samples.durations {
            Some(d) => Some(centered(&speed_error_samples(&samples.errors, d)?)),
            None => None,
        };
        Ok(ErrorGenerator::Empirical {
            position: centered(&samples.errors),
            speed,
            fallback,
        })
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ErrorGenerator::Gaussian(e) => e.is_zero(),
            ErrorGenerator::Empirical { position, speed, .. } => {
                position.iter().all(|p| *p == [0.0, 0.0])
                    && speed.as_ref().is_some_and(|s| s.iter().all(|p| *p == [0.0, 0.0]))
            }
        }
    }

    fn position<R: Rng + ?Sized>(&self, c: Component, rng: &mut R) -> f64 {
        match self {
            ErrorGenerator::Gaussian(e) => {
                let z: f64 = rng.sample(StandardNormal);
                e.position.sigma[c.index()] * z
            }
            ErrorGenerator::Empirical { position, .. } => position[rng.random_range(0..position.len())][c.index()],
        }
    }

    fn speed<R: Rng + ?Sized>(&self, c: Component, rng: &mut R) -> f64 {
        match self {
            ErrorGenerator::Empirical { speed: Some(s), .. } => s[rng.random_range(0..s.len())][c.index()],
            ErrorGenerator::Gaussian(e) | ErrorGenerator::Empirical { fallback: e, .. } => {
                let z: f64 = rng.sample(StandardNormal);
                e.speed.sigma[c.index()] * z
            }
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rule: NoiseRule, rng: &mut R) -> f64 {
        match rule {
            NoiseRule::Exact => 0.0,
            NoiseRule::Position(c) => self.position(c, rng),
            NoiseRule::PositionDiff(c) => self.position(c, rng) - self.position(c, rng),
            NoiseRule::Speed(c) => self.speed(c, rng),
            NoiseRule::SpeedDiff(c) => self.speed(c, rng) - self.speed(c, rng),
        }
    }
}

/// `y + sqrt(λ) ε` with `ε` drawn per frame and channel according to
/// `rules`. `λ = 0` returns the input unchanged without consuming draws.
pub fn inflate_noise<R: Rng + ?Sized>(
    series: &MultiSeries,
    rules: &[NoiseRule],
    lambda: f64,
    gen: &ErrorGenerator,
    rng: &mut R,
) -> Result<MultiSeries, SimexError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SimexError::BadLambda(lambda));
    }
    if rules.len() != series.channels() {
        return Err(SimexError::RuleCount {
            rules: rules.len(),
            channels: series.channels(),
        });
    }
    let mut out = series.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    let scale = lambda.sqrt();
    for i in 0..series.len() {
        for (c, &rule) in rules.iter().enumerate() {
            if rule != NoiseRule::Exact {
                *out.get_mut(i, c) += scale * gen.draw(rule, rng);
            }
        }
    }
    Ok(out)
}

/// Quadratic fit of `T(λ)`: coefficients `(β0, β1, β2)` and the value at
/// `λ = -1`, `β0 - β1 + β2`. Three points are interpolated; more are
/// fitted by least squares.
pub fn quad_extrapolate(points: &[(f64, f64)]) -> Result<([f64; 3], f64), SimexError> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(SimexError::Rank(distinct.len()));
    }
    // normal equations in the monomial basis
    let mut a = [[0.0f64; 4]; 3];
    for &(l, t) in points {
        let basis = [1.0, l, l * l];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] += basis[r] * basis[c];
            }
            a[r][3] += basis[r] * t;
        }
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..4 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let beta = [a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]];
    Ok((beta, beta[0] - beta[1] + beta[2]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InflationMode {
    /// Only error-bearing episodes receive noise.
    #[default]
    GroundTruth,
    /// Both episodes of every pair receive noise.
    InflateBoth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimexConfig {
    pub lambdas: Vec<f64>,
    pub replicates: usize,
    pub mode: InflationMode,
    pub seed: u64,
}

impl Default for SimexConfig {
    fn default() -> Self {
        SimexConfig {
            lambdas: vec![0.0, 1.0, 2.0],
            replicates: 100,
            mode: InflationMode::GroundTruth,
            seed: 0,
        }
    }
}

impl SimexConfig {
    pub fn validate(&self) -> Result<(), SimexError> {
        if let Some(&l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(SimexError::BadLambda(l));
        }
        if !self.lambdas.contains(&0.0) {
            return Err(SimexError::NoZero);
        }
        if self.replicates == 0 {
            return Err(SimexError::NoReplicates);
        }
        let mut d = self.lambdas.clone();
        d.sort_by(f64::total_cmp);
        d.dedup();
        if d.len() < 3 {
            return Err(SimexError::Rank(d.len()));
        }
        Ok(())
    }
}

/// An episode as seen by the SIMEX engine.
#[derive(Debug, Clone, Copy)]
pub struct SimexInput<'a> {
    pub series: &'a MultiSeries,
    pub rules: &'a [NoiseRule],
    pub error_bearing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimexResult {
    pub lambdas: Vec<f64>,
    pub t_lambda: Vec<f64>,
    pub b_effective: Vec<usize>,
    pub betas: [f64; 3],
    pub d0: f64,
    /// `DTW*` of the pair as observed.
    pub raw: f64,
}

/// SIMEX-corrected `DTW*` for one pair. `key` identifies the pair so that
/// replicate streams are independent across pairs.
pub fn simex_distance(
    a: SimexInput<'_>,
    b: SimexInput<'_>,
    dtw: &DtwConfig,
    gen: &ErrorGenerator,
    cfg: &SimexConfig,
    key: &[u64],
) -> Result<SimexResult, SimexError> {
    cfg.validate()?;
    let star = |x: &MultiSeries, y: &MultiSeries| -> Result<f64, DtwError> { Ok(dtw_distance(x, y, dtw)?.normalized()) };
    let raw = star(a.series, b.series)?;
    let noisy_a = a.error_bearing || cfg.mode == InflationMode::InflateBoth;
    let noisy_b = b.error_bearing || cfg.mode == InflationMode::InflateBoth;
    let quiet = (!noisy_a && !noisy_b) || gen.is_zero();

    let mut t_lambda = Vec::with_capacity(cfg.lambdas.len());
    let mut b_effective = Vec::with_capacity(cfg.lambdas.len());
    for (li, &lambda) in cfg.lambdas.iter().enumerate() {
        if lambda == 0.0 || quiet {
            t_lambda.push(raw);
            b_effective.push(cfg.replicates);
            continue;
        }
        let mut sum = 0.0;
        let mut kept = 0;
        for rep in 0..cfg.replicates {
            let mut rk = key.to_vec();
            rk.extend([li as u64, rep as u64]);
            let mut rng: StreamRng = stream(cfg.seed, &rk);
            let ya = if noisy_a { inflate_noise(a.series, a.rules, lambda, gen, &mut rng)? } else { a.series.clone() };
            let yb = if noisy_b { inflate_noise(b.series, b.rules, lambda, gen, &mut rng)? } else { b.series.clone() };
            let d = star(&ya, &yb)?;
            if d.is_finite() {
                sum += d;
                kept += 1;
            } else {
                tracing::warn!(lambda, rep, "non-finite replicate rejected");
            }
        }
        if kept == 0 {
            return Err(SimexError::AllRejected(lambda));
        }
        t_lambda.push(sum / kept as f64);
        b_effective.push(kept);
    }
    let points: Vec<(f64, f64)> = cfg.lambdas.iter().copied().zip(t_lambda.iter().copied()).collect();
    let (betas, d0) = quad_extrapolate(&points)?;
    Ok(SimexResult {
        lambdas: cfg.lambdas.clone(),
        t_lambda,
        b_effective,
        betas,
        d0,
        raw,
    })
}

/// One pair in a SIMEX distance table, in the order the pairs were listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimexPair {
    pub group: String,
    pub a: usize,
    pub b: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub result: SimexResult,
}

fn group_key(group: &str) -> u64 {
    // FNV-1a, stable across platforms and releases
    group.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// SIMEX distances for the listed index pairs, computed in parallel.
pub fn simex_pairs(
    group: &str,
    left: &[SimexInput<'_>],
    right: &[SimexInput<'_>],
    pairs: &[(usize, usize)],
    dtw: &DtwConfig,
    gen: &ErrorGenerator,
    cfg: &SimexConfig,
) -> Result<Vec<SimexPair>, SimexError> {
    let gk = group_key(group);
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let result = simex_distance(left[i], right[j], dtw, gen, cfg, &[gk, i as u64, j as u64])?;
            Ok(SimexPair {
                group: group.to_owned(),
                a: i,
                b: j,
                seed: cfg.seed,
                result,
            })
        })
        .collect()
}

pub fn cross_pairs(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect()
}

pub fn within_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error_model::{derive_error_set, ErrorModel2D, SpeedErrorSource};
    use rand::SeedableRng;

    fn reported() -> DerivedErrorSet {
        let pos = ErrorModel2D::new([0.276, 0.006], [1.075, 0.530], -0.291, 50).unwrap();
        let spd = ErrorModel2D::new([0.0, 0.0], [0.0636, 0.03], 0.0, 50).unwrap();
        derive_error_set(&pos, SpeedErrorSource::Model(spd)).unwrap()
    }

    #[test]
    fn extrapolation_cases() {
        assert!((quad_extrapolate(&[(0.0, 5.0), (1.0, 5.0), (2.0, 5.0)]).unwrap().1 - 5.0).abs() < 1e-12);
        assert!(quad_extrapolate(&[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)]).unwrap().1.abs() < 1e-12);
        let (b, d0) = quad_extrapolate(&[(0.0, 1.0), (1.0, 4.0), (2.0, 9.0)]).unwrap();
        assert!(d0.abs() < 1e-12);
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 2.0).abs() < 1e-12 && (b[2] - 1.0).abs() < 1e-12);
        assert_eq!(d0, b[0] - b[1] + b[2]);
        assert!(matches!(quad_extrapolate(&[(0.0, 1.0), (1.0, 2.0), (1.0, 3.0)]), Err(SimexError::Rank(2))));
    }

    #[test]
    fn least_squares_with_more_points() {
        let pts: Vec<(f64, f64)> = [0.0, 0.5, 1.0, 1.5, 2.0].iter().map(|&l| (l, 2.0 - 0.5 * l + 0.25 * l * l)).collect();
        let (b, d0) = quad_extrapolate(&pts).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12 && (b[1] + 0.5).abs() < 1e-12 && (b[2] - 0.25).abs() < 1e-12);
        assert!((d0 - 2.75).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_identity() {
        let s = MultiSeries::from_frames(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let mut rng = StreamRng::seed_from_u64(0);
        let out = inflate_noise(&s, &CF_RULES, 0.0, &ErrorGenerator::Gaussian(reported()), &mut rng).unwrap();
        assert_eq!(out, s);
        assert!(inflate_noise(&s, &CF_RULES, -1.0, &ErrorGenerator::Gaussian(reported()), &mut rng).is_err());
        let zero = ErrorGenerator::Gaussian(DerivedErrorSet::zero());
        assert_eq!(inflate_noise(&s, &CF_RULES, 2.0, &zero, &mut rng).unwrap(), s);
    }

    #[test]
    fn spacing_variance_doubles() {
        let err = reported();
        let n = 100_000;
        let s = MultiSeries::new(3, vec![0.0; 3 * n]).unwrap();
        let mut rng = stream(42, &[1]);
        let out = inflate_noise(&s, &CF_RULES, 1.0, &ErrorGenerator::Gaussian(err), &mut rng).unwrap();
        let var = |c: usize| out.channel(c).map(|x| x * x).sum::<f64>() / n as f64;
        let expect_g = 2.0 * 1.075f64.powi(2);
        assert!((var(0) / expect_g - 1.0).abs() < 0.03, "{}", var(0));
        assert!((var(1) / (2.0 * 0.0636f64.powi(2)) - 1.0).abs() < 0.03);
        assert!((var(2) / 0.0636f64.powi(2) - 1.0).abs() < 0.03);
    }

    #[test]
    fn empirical_generator_is_centered_bootstrap() {
        let samples = ErrorSamples {
            errors: vec![[1.0, 0.0], [3.0, 2.0]],
            durations: None,
        };
        let gen = ErrorGenerator::empirical(&samples, reported()).unwrap();
        let mut rng = stream(1, &[]);
        for _ in 0..20 {
            let d = gen.position(Component::X, &mut rng);
            assert!(d == 1.0 || d == -1.0);
        }
    }

    fn ramp(n: usize, slope: f64) -> MultiSeries {
        let frames: Vec<[f64; 3]> = (0..n).map(|k| [10.0 + slope * k as f64, 0.1 * k as f64, 5.0]).collect();
        MultiSeries::from_frames(&frames)
    }

    #[test]
    fn clean_pairs_are_constant() {
        let a = ramp(30, 0.2);
        let b = ramp(25, 0.3);
        let ia = SimexInput { series: &a, rules: &CF_RULES, error_bearing: false };
        let ib = SimexInput { series: &b, rules: &CF_RULES, error_bearing: false };
        let cfg = SimexConfig { replicates: 5, ..Default::default() };
        let r = simex_distance(ia, ib, &DtwConfig::unit(3), &ErrorGenerator::Gaussian(reported()), &cfg, &[0]).unwrap();
        assert!(r.t_lambda.iter().all(|&t| t == r.raw));
        assert!((r.d0 - r.raw).abs() < 1e-12 * r.raw.max(1.0));
    }

    #[test]
    fn seeded_runs_reproduce() {
        let a = ramp(30, 0.2);
        let b = ramp(25, 0.3);
        let ia = SimexInput { series: &a, rules: &CF_RULES, error_bearing: true };
        let ib = SimexInput { series: &b, rules: &CF_RULES, error_bearing: false };
        let cfg = SimexConfig { replicates: 1, seed: 9, ..Default::default() };
        let gen = ErrorGenerator::Gaussian(reported());
        let r1 = simex_distance(ia, ib, &DtwConfig::unit(3), &gen, &cfg, &[0, 1]).unwrap();
        let r2 = simex_distance(ia, ib, &DtwConfig::unit(3), &gen, &cfg, &[0, 1]).unwrap();
        assert_eq!(r1.d0.to_bits(), r2.d0.to_bits());
        assert!(r1.t_lambda[1] > r1.t_lambda[0]);
        let other = simex_distance(ia, ib, &DtwConfig::unit(3), &gen, &cfg, &[0, 2]).unwrap();
        assert_ne!(other.t_lambda[1], r1.t_lambda[1]);
    }

    #[test]
    fn config_validation() {
        let mut c = SimexConfig::default();
        assert!(c.validate().is_ok());
        c.lambdas = vec![1.0, 2.0, 3.0];
        assert_eq!(c.validate(), Err(SimexError::NoZero));
        c.lambdas = vec![0.0, 1.0];
        assert_eq!(c.validate(), Err(SimexError::Rank(2)));
        c = SimexConfig { replicates: 0, ..Default::default() };
        assert_eq!(c.validate(), Err(SimexError::NoReplicates));
    }

    #[test]
    fn pair_layout() {
        assert_eq!(within_pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(cross_pairs(2, 2).len(), 4);
    }
}
