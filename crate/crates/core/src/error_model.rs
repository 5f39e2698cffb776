//! Bivariate Gaussian travel-distance error model, Mardia normality tests
//! and propagation of the error to spacing, speed and relative speed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ErrorModelError {
    #[error("need at least {needed} samples, got {have}")]
    TooFewSamples { needed: usize, have: usize },
    #[error("sample covariance is singular (samples are constant or collinear)")]
    Degenerate,
    #[error("invalid error model: {0}")]
    Invalid(String),
    #[error("elapsed time must be positive, sample {index} has {value}")]
    BadDuration { index: usize, value: f64 },
    #[error("{0} error samples but {1} durations")]
    LengthMismatch(usize, usize),
    #[error("{path}: {message}")]
    Read { path: String, message: String },
}

/// Bivariate normal description of a 2D error vector (meters, or m/s for
/// speed errors).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel2D {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub rho: f64,
    pub n_samples: usize,
}

impl ErrorModel2D {
    pub fn new(mu: [f64; 2], sigma: [f64; 2], rho: f64, n_samples: usize) -> Result<Self, ErrorModelError> {
        if !(sigma[0] >= 0.0 && sigma[1] >= 0.0 && sigma.iter().all(|s| s.is_finite())) {
            return Err(ErrorModelError::Invalid(format!("sigma {sigma:?}")));
        }
        if !(rho > -1.0 && rho < 1.0) {
            return Err(ErrorModelError::Invalid(format!("rho {rho} outside (-1, 1)")));
        }
        if !mu.iter().all(|m| m.is_finite()) {
            return Err(ErrorModelError::Invalid(format!("mu {mu:?}")));
        }
        Ok(ErrorModel2D {
            mu,
            sigma,
            rho,
            n_samples,
        })
    }

    /// Error-free model, used for ground-truth data.
    pub fn zero() -> Self {
        ErrorModel2D {
            mu: [0.0; 2],
            sigma: [0.0; 2],
            rho: 0.0,
            n_samples: 0,
        }
    }

    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let c = self.rho * self.sigma[0] * self.sigma[1];
        [[self.sigma[0].powi(2), c], [c, self.sigma[1].powi(2)]]
    }

    pub fn is_zero(&self) -> bool {
        self.sigma == [0.0, 0.0]
    }

    /// One draw from the model.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        [
            self.mu[0] + self.sigma[0] * z1,
            self.mu[1] + self.sigma[1] * (self.rho * z1 + (1.0 - self.rho * self.rho).sqrt() * z2),
        ]
    }
}

fn mean_cov(samples: &[[f64; 2]]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = samples.len() as f64;
    let mut m = [0.0; 2];
    for s in samples {
        m[0] += s[0];
        m[1] += s[1];
    }
    m[0] /= n;
    m[1] /= n;
    let mut c = [[0.0; 2]; 2];
    for s in samples {
        let d = [s[0] - m[0], s[1] - m[1]];
        c[0][0] += d[0] * d[0];
        c[0][1] += d[0] * d[1];
        c[1][1] += d[1] * d[1];
    }
    c[0][0] /= n;
    c[0][1] /= n;
    c[1][1] /= n;
    c[1][0] = c[0][1];
    (m, c)
}

fn is_singular(c: &[[f64; 2]; 2]) -> bool {
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    !(c[0][0] > 0.0 && c[1][1] > 0.0) || det <= 1e-12 * c[0][0] * c[1][1]
}

/// Maximum-likelihood fit (covariance normalized by `n`).
pub fn fit_bivariate_error(samples: &[[f64; 2]]) -> Result<ErrorModel2D, ErrorModelError> {
    if samples.len() < 3 {
        return Err(ErrorModelError::TooFewSamples {
            needed: 3,
            have: samples.len(),
        });
    }
    let (mu, c) = mean_cov(samples);
    if is_singular(&c) {
        return Err(ErrorModelError::Degenerate);
    }
    let sigma = [c[0][0].sqrt(), c[1][1].sqrt()];
    Ok(ErrorModel2D {
        mu,
        sigma,
        rho: c[0][1] / (sigma[0] * sigma[1]),
        n_samples: samples.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MardiaResult {
    pub n: usize,
    /// Multivariate skewness b1,2.
    pub skewness: f64,
    /// Multivariate kurtosis b2,2.
    pub kurtosis: f64,
    /// n * b1 / 6, chi-squared with 4 degrees of freedom under normality.
    pub skewness_statistic: f64,
    /// Standardized kurtosis, standard normal under normality.
    pub kurtosis_statistic: f64,
    pub p_skewness: f64,
    pub p_kurtosis: f64,
}

/// Mardia's multivariate skewness and kurtosis tests for 2D samples.
pub fn mardia_tests(samples: &[[f64; 2]]) -> Result<MardiaResult, ErrorModelError> {
    const P: f64 = 2.0;
    if samples.len() < 5 {
        return Err(ErrorModelError::TooFewSamples {
            needed: 5,
            have: samples.len(),
        });
    }
    let nf = samples.len() as f64;
    let (m, c) = mean_cov(samples);
    if is_singular(&c) {
        return Err(ErrorModelError::Degenerate);
    }
    // whiten with the Cholesky factor so that d_i' S^-1 d_j = z_i . z_j
    let l11 = c[0][0].sqrt();
    let l21 = c[1][0] / l11;
    let l22 = (c[1][1] - l21 * l21).sqrt();
    let z: Vec<[f64; 2]> = samples
        .iter()
        .map(|s| {
            let d0 = s[0] - m[0];
            let d1 = s[1] - m[1];
            let z0 = d0 / l11;
            [z0, (d1 - l21 * z0) / l22]
        })
        .collect();
    // sum_ij (z_i . z_j)^3 = sum_abc (sum_i z_ia z_ib z_ic)^2
    let mut third = [[[0.0f64; 2]; 2]; 2];
    let mut fourth = 0.0;
    for zi in &z {
        for a in 0..2 {
            for b in 0..2 {
                for cc in 0..2 {
                    third[a][b][cc] += zi[a] * zi[b] * zi[cc];
                }
            }
        }
        let r2 = zi[0] * zi[0] + zi[1] * zi[1];
        fourth += r2 * r2;
    }
    let cube_sum: f64 = third.iter().flatten().flatten().map(|v| v * v).sum();
    let b1 = cube_sum / (nf * nf);
    let b2 = fourth / nf;

    let skew_stat = nf * b1 / 6.0;
    let df = P * (P + 1.0) * (P + 2.0) / 6.0;
    let chi = ChiSquared::new(df).expect("positive df");
    let p_skew = chi.sf(skew_stat).clamp(0.0, 1.0);

    let kurt_stat = (b2 - P * (P + 2.0)) / (8.0 * P * (P + 2.0) / nf).sqrt();
    let normal = Normal::standard();
    let p_kurt = (2.0 * normal.sf(kurt_stat.abs())).clamp(0.0, 1.0);

    Ok(MardiaResult {
        n: samples.len(),
        skewness: b1,
        kurtosis: b2,
        skewness_statistic: skew_stat,
        kurtosis_statistic: kurt_stat,
        p_skewness: p_skew,
        p_kurtosis: p_kurt,
    })
}

/// Zero-mean relative-speed error: the difference of two independent
/// speed errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeSpeedError {
    pub sigma: [f64; 2],
    pub rho: f64,
}

/// Error variances for the channels that enter the car-following and
/// lane-change state vectors. Lead and follower errors are independent and
/// the x/y channels are propagated separately; `position.rho` is kept for
/// reporting only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedErrorSet {
    pub position: ErrorModel2D,
    /// Longitudinal spacing error variance, 2 sigma_x^2.
    pub spacing_var: f64,
    pub speed: ErrorModel2D,
    pub relative_speed: RelativeSpeedError,
}

impl DerivedErrorSet {
    pub fn zero() -> Self {
        DerivedErrorSet {
            position: ErrorModel2D::zero(),
            spacing_var: 0.0,
            speed: ErrorModel2D::zero(),
            relative_speed: RelativeSpeedError {
                sigma: [0.0; 2],
                rho: 0.0,
            },
        }
    }

    pub fn spacing_sd(&self) -> f64 {
        self.spacing_var.sqrt()
    }

    pub fn speed_sd(&self) -> f64 {
        self.speed.sigma[0]
    }

    pub fn relative_speed_sd(&self) -> f64 {
        self.relative_speed.sigma[0]
    }

    pub fn is_zero(&self) -> bool {
        self.position.is_zero() && self.speed.is_zero()
    }
}

/// Where the speed error model comes from.
#[derive(Debug, Clone, Copy)]
pub enum SpeedErrorSource<'a> {
    /// A speed error model fitted elsewhere.
    Model(ErrorModel2D),
    /// Distance errors with the elapsed time of each measured interval;
    /// speed errors are the per-sample ratios.
    Samples {
        errors: &'a [[f64; 2]],
        durations: &'a [f64],
    },
}

/// Per-sample speed errors: distance error divided by elapsed time.
pub fn speed_error_samples(
    errors: &[[f64; 2]],
    durations: &[f64],
) -> Result<Vec<[f64; 2]>, ErrorModelError> {
    if errors.len() != durations.len() {
        return Err(ErrorModelError::LengthMismatch(errors.len(), durations.len()));
    }
    errors
        .iter()
        .zip(durations)
        .enumerate()
        .map(|(i, (e, &d))| {
            if d > 0.0 && d.is_finite() {
                Ok([e[0] / d, e[1] / d])
            } else {
                Err(ErrorModelError::BadDuration { index: i, value: d })
            }
        })
        .collect()
}

pub fn derive_error_set(
    model: &ErrorModel2D,
    speed: SpeedErrorSource<'_>,
) -> Result<DerivedErrorSet, ErrorModelError> {
    let speed = match speed {
        SpeedErrorSource::Model(m) => m,
        SpeedErrorSource::Samples { errors, durations } => {
            fit_bivariate_error(&speed_error_samples(errors, durations)?)?
        }
    };
    let root2 = std::f64::consts::SQRT_2;
    Ok(DerivedErrorSet {
        position: *model,
        spacing_var: 2.0 * model.sigma[0] * model.sigma[0],
        speed,
        relative_speed: RelativeSpeedError {
            sigma: [root2 * speed.sigma[0], root2 * speed.sigma[1]],
            rho: speed.rho,
        },
    })
}

/// On-disk error model: the fitted position model plus derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModelFile {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub rho: f64,
    pub n: usize,
    pub derived: DerivedErrorSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mardia: Option<MardiaResult>,
}

impl ErrorModelFile {
    pub fn new(derived: DerivedErrorSet, mardia: Option<MardiaResult>) -> Self {
        let p = derived.position;
        ErrorModelFile {
            mu: p.mu,
            sigma: p.sigma,
            rho: p.rho,
            n: p.n_samples,
            derived,
            mardia,
        }
    }
}

/// Error samples as CSV: columns `ex,ey` in meters, with an optional third
/// column `duration_s`. A header row is allowed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorSamples {
    pub errors: Vec<[f64; 2]>,
    pub durations: Option<Vec<f64>>,
}

pub fn parse_error_samples(text: &str) -> Result<ErrorSamples, ErrorModelError> {
    let mut out = ErrorSamples::default();
    let mut durations = Vec::new();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| ErrorModelError::Invalid(e.to_string()))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) if v.len() >= 2 => {
                out.errors.push([v[0], v[1]]);
                if let Some(&d) = v.get(2) {
                    durations.push(d);
                }
            }
            Ok(_) => {
                return Err(ErrorModelError::Invalid(format!(
                    "row {}: expected at least 2 columns",
                    i + 1
                )))
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(ErrorModelError::Invalid(format!("row {}: {e}", i + 1))),
        }
    }
    if !durations.is_empty() {
        if durations.len() != out.errors.len() {
            return Err(ErrorModelError::LengthMismatch(out.errors.len(), durations.len()));
        }
        out.durations = Some(durations);
    }
    Ok(out)
}

pub fn load_error_samples(path: &Path) -> Result<ErrorSamples, ErrorModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| ErrorModelError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_error_samples(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn reported_position_model() -> ErrorModel2D {
        ErrorModel2D::new([0.276, 0.006], [1.075, 0.530], -0.291, 50).unwrap()
    }

    #[test]
    fn constant_samples_are_degenerate() {
        let s = vec![[0.3, 0.1]; 10];
        assert!(matches!(fit_bivariate_error(&s), Err(ErrorModelError::Degenerate)));
        assert!(matches!(mardia_tests(&s), Err(ErrorModelError::Degenerate)));
        let line: Vec<_> = (0..10).map(|k| [k as f64, 2.0 * k as f64]).collect();
        assert!(matches!(fit_bivariate_error(&line), Err(ErrorModelError::Degenerate)));
        assert!(matches!(
            fit_bivariate_error(&[[0.0, 1.0], [1.0, 0.0]]),
            Err(ErrorModelError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn mirrored_pairs_have_zero_mean() {
        let half = [[0.3, 1.2], [-0.7, 0.4], [1.1, -0.2], [0.25, 0.5]];
        let s: Vec<_> = half.iter().flat_map(|&[x, y]| [[x, y], [-x, -y]]).collect();
        let m = fit_bivariate_error(&s).unwrap();
        assert_eq!(m.mu, [0.0, 0.0]);
    }

    #[test]
    fn recovers_parameters_from_draws() {
        let truth = reported_position_model();
        let mut r = rng::stream(2024, &[0]);
        let s: Vec<_> = (0..10_000).map(|_| truth.sample(&mut r)).collect();
        let fit = fit_bivariate_error(&s).unwrap();
        let n = s.len() as f64;
        let se_mu = [truth.sigma[0] / n.sqrt(), truth.sigma[1] / n.sqrt()];
        let se_sigma = [truth.sigma[0] / (2.0 * n).sqrt(), truth.sigma[1] / (2.0 * n).sqrt()];
        let se_rho = (1.0 - truth.rho * truth.rho) / n.sqrt();
        for k in 0..2 {
            assert!((fit.mu[k] - truth.mu[k]).abs() < 3.0 * se_mu[k], "mu {k}");
            assert!((fit.sigma[k] - truth.sigma[k]).abs() < 3.0 * se_sigma[k], "sigma {k}");
        }
        assert!((fit.rho - truth.rho).abs() < 3.0 * se_rho);
        assert_eq!(fit.n_samples, 10_000);
    }

    #[test]
    fn symmetric_sample_has_zero_skewness() {
        let half = [[0.3, 1.2], [-0.7, 0.4], [1.1, -0.2], [0.25, 0.5], [2.0, 0.1]];
        let s: Vec<_> = half
            .iter()
            .flat_map(|&[x, y]| [[1.0 + x, -2.0 + y], [1.0 - x, -2.0 - y]])
            .collect();
        let m = mardia_tests(&s).unwrap();
        assert!(m.skewness.abs() < 1e-12);
        assert!((m.p_skewness - 1.0).abs() < 1e-9);
    }

    #[test]
    fn skewed_mixture_rejects() {
        let mut r = rng::stream(5, &[1]);
        let s: Vec<_> = (0..400)
            .map(|_| {
                let a: f64 = r.sample(StandardNormal);
                let b: f64 = r.sample(StandardNormal);
                // chi-squared(1)-like first coordinate
                [a * a, 0.5 * b]
            })
            .collect();
        let m = mardia_tests(&s).unwrap();
        assert!(m.p_skewness < 0.01, "p = {}", m.p_skewness);
    }

    /// Direct O(n^2) evaluation with an explicit inverse covariance.
    fn mardia_direct(s: &[[f64; 2]]) -> (f64, f64) {
        let n = s.len() as f64;
        let (m, c) = mean_cov(s);
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let inv = [[c[1][1] / det, -c[0][1] / det], [-c[1][0] / det, c[0][0] / det]];
        let d: Vec<[f64; 2]> = s.iter().map(|p| [p[0] - m[0], p[1] - m[1]]).collect();
        let q = |a: &[f64; 2], b: &[f64; 2]| {
            a[0] * (inv[0][0] * b[0] + inv[0][1] * b[1]) + a[1] * (inv[1][0] * b[0] + inv[1][1] * b[1])
        };
        let mut b1 = 0.0;
        let mut b2 = 0.0;
        for a in &d {
            for b in &d {
                b1 += q(a, b).powi(3);
            }
            b2 += q(a, a).powi(2);
        }
        (b1 / (n * n), b2 / n)
    }

    #[test]
    fn whitened_sums_match_direct_formula() {
        let mut r = rng::stream(11, &[]);
        let m = reported_position_model();
        let s: Vec<_> = (0..60).map(|_| m.sample(&mut r)).collect();
        let (b1, b2) = mardia_direct(&s);
        let res = mardia_tests(&s).unwrap();
        assert!((res.skewness - b1).abs() < 1e-10 * b1.max(1.0));
        assert!((res.kurtosis - b2).abs() < 1e-10 * b2);
    }

    #[test]
    fn spacing_and_relative_speed_closed_forms() {
        let speed = ErrorModel2D::new([0.0163, 0.0004], [0.0636, 0.0314], -0.183, 50).unwrap();
        let d = derive_error_set(&reported_position_model(), SpeedErrorSource::Model(speed)).unwrap();
        assert!((d.spacing_var - 2.31125).abs() < 1e-12);
        assert!((d.spacing_var - 2.309).abs() / 2.309 < 0.005);
        assert_eq!(format!("{:.4}", d.relative_speed.sigma[0]), "0.0899");
        assert_eq!(format!("{:.4}", d.relative_speed.sigma[1]), "0.0444");
        assert!((d.relative_speed.sigma[0] / d.speed.sigma[0] - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert_eq!(d.relative_speed.rho, -0.183);
    }

    #[test]
    fn zero_model_propagates_to_zero() {
        let d = derive_error_set(&ErrorModel2D::zero(), SpeedErrorSource::Model(ErrorModel2D::zero())).unwrap();
        assert_eq!(d.spacing_var, 0.0);
        assert_eq!(d.relative_speed.sigma, [0.0, 0.0]);
        assert!(d.is_zero());
    }

    #[test]
    fn speed_from_durations() {
        let errors = [[1.0, 0.5], [-2.0, 0.2], [0.5, -1.0], [3.0, 0.0]];
        let durations = [10.0, 20.0, 5.0, 30.0];
        let d = derive_error_set(
            &reported_position_model(),
            SpeedErrorSource::Samples { errors: &errors, durations: &durations },
        )
        .unwrap();
        let direct = fit_bivariate_error(&[[0.1, 0.05], [-0.1, 0.01], [0.1, -0.2], [0.1, 0.0]]).unwrap();
        assert!((d.speed.sigma[0] - direct.sigma[0]).abs() < 1e-12);
        let bad = [10.0, 0.0, 5.0, 30.0];
        assert!(matches!(
            derive_error_set(
                &reported_position_model(),
                SpeedErrorSource::Samples { errors: &errors, durations: &bad }
            ),
            Err(ErrorModelError::BadDuration { index: 1, .. })
        ));
    }

    #[test]
    fn parses_sample_csv() {
        let s = parse_error_samples("ex,ey\n0.1,0.2\n-0.3,0.4\n").unwrap();
        assert_eq!(s.errors, vec![[0.1, 0.2], [-0.3, 0.4]]);
        assert!(s.durations.is_none());
        let s = parse_error_samples("0.1,0.2,12.5\n-0.3,0.4,20\n").unwrap();
        assert_eq!(s.durations, Some(vec![12.5, 20.0]));
        assert!(parse_error_samples("0.1,0.2\nx,y\n").is_err());
    }

    fn arb_samples() -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 8..40)
            .prop_map(|v| v.into_iter().map(|(a, b)| [a, b]).collect())
    }

    proptest! {
        #[test]
        fn fit_is_shift_equivariant(s in arb_samples(), cx in -100.0f64..100.0, cy in -100.0f64..100.0) {
            let Ok(base) = fit_bivariate_error(&s) else { return Ok(()) };
            let shifted: Vec<_> = s.iter().map(|p| [p[0] + cx, p[1] + cy]).collect();
            let m = fit_bivariate_error(&shifted).unwrap();
            prop_assert!((m.mu[0] - base.mu[0] - cx).abs() < 1e-9);
            prop_assert!((m.mu[1] - base.mu[1] - cy).abs() < 1e-9);
            prop_assert!((m.sigma[0] - base.sigma[0]).abs() < 1e-9);
            prop_assert!((m.sigma[1] - base.sigma[1]).abs() < 1e-9);
            prop_assert!((m.rho - base.rho).abs() < 1e-7);
        }

        #[test]
        fn mardia_is_affine_invariant(
            s in arb_samples(),
            a in prop::array::uniform4(-3.0f64..3.0),
            shift in prop::array::uniform2(-50.0f64..50.0),
        ) {
            let det = a[0] * a[3] - a[1] * a[2];
            prop_assume!(det.abs() > 0.1);
            let Ok(base) = mardia_tests(&s) else { return Ok(()) };
            let t: Vec<_> = s
                .iter()
                .map(|p| [a[0] * p[0] + a[1] * p[1] + shift[0], a[2] * p[0] + a[3] * p[1] + shift[1]])
                .collect();
            let m = mardia_tests(&t).unwrap();
            prop_assert!((m.skewness - base.skewness).abs() < 1e-6 * base.skewness.max(1.0));
            prop_assert!((m.kurtosis - base.kurtosis).abs() < 1e-6 * base.kurtosis);
        }
    }
}
