//! Permutation test on mean differences, two-sample Kolmogorov–Smirnov and
//! Welch's t-test from summary statistics.

use crate::extract::HeadwayRecord;
use crate::rng::stream;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample {0} is empty")]
    Empty(&'static str),
    #[error("at least one permutation is required")]
    NoReplicates,
    #[error("need n >= 2 on both sides")]
    TooFew,
    #[error("non-finite value in sample {0}")]
    NonFinite(&'static str),
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check(name: &'static str, v: &[f64]) -> Result<(), StatsError> {
    if v.is_empty() {
        return Err(StatsError::Empty(name));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite(name));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermTestResult {
    pub t_obs: f64,
    pub p: f64,
    pub replicates: usize,
    pub exceedances: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub null_samples: Option<Vec<f64>>,
}

/// One-sided test of `mean(cross) > mean(within)`: the p-value is the
/// fraction of `replicates` label permutations whose mean difference is at
/// least the observed one. Replicate `b` uses its own keyed stream, so the
/// result is independent of thread count.
pub fn permutation_test_mean_diff(
    cross: &[f64],
    within: &[f64],
    replicates: usize,
    seed: u64,
    keep_null: bool,
) -> Result<PermTestResult, StatsError> {
    check("cross", cross)?;
    check("within", within)?;
    if replicates == 0 {
        return Err(StatsError::NoReplicates);
    }
    let t_obs = mean(cross) - mean(within);
    let pooled: Vec<f64> = cross.iter().chain(within).copied().collect();
    let total: f64 = pooled.iter().sum();
    let (n, na) = (pooled.len(), cross.len());
    let scale = pooled.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    // shuffle only the smaller group's slots
    let k = na.min(n - na);
    let nulls: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map_init(
            || pooled.clone(),
            |buf, b| {
                let mut rng = stream(seed, &[b as u64]);
                for i in 0..k {
                    let j = rng.random_range(i..n);
                    buf.swap(i, j);
                }
                let s: f64 = buf[..k].iter().sum();
                let (sa, sb) = if k == na { (s, total - s) } else { (total - s, s) };
                buf.copy_from_slice(&pooled);
                sa / na as f64 - sb / (n - na) as f64
            },
        )
        .collect();
    let exceedances = nulls.iter().filter(|&&t| t >= t_obs - tol).count();
    Ok(PermTestResult {
        t_obs,
        p: exceedances as f64 / replicates as f64,
        replicates,
        exceedances,
        null_samples: keep_null.then_some(nulls),
    })
}

/// Exact permutation p-value over all `C(n, n_cross)` group assignments.
/// Intended for small samples.
pub fn permutation_exact(cross: &[f64], within: &[f64]) -> Result<PermTestResult, StatsError> {
    check("cross", cross)?;
    check("within", within)?;
    let pooled: Vec<f64> = cross.iter().chain(within).copied().collect();
    let (n, na) = (pooled.len(), cross.len());
    let total: f64 = pooled.iter().sum();
    let t_obs = mean(cross) - mean(within);
    let scale = pooled.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let mut count = 0;
    let mut all = 0;
    let mut pick: Vec<usize> = (0..na).collect();
    loop {
        let s: f64 = pick.iter().map(|&i| pooled[i]).sum();
        let t = s / na as f64 - (total - s) / (n - na) as f64;
        all += 1;
        if t >= t_obs - 1e-12 * scale {
            count += 1;
        }
        // next combination in lexicographic order
        let Some(i) = (0..na).rev().find(|&i| pick[i] < n - na + i) else { break };
        pick[i] += 1;
        for j in i + 1..na {
            pick[j] = pick[j - 1] + 1;
        }
    }
    Ok(PermTestResult {
        t_obs,
        p: count as f64 / all as f64,
        replicates: all,
        exceedances: count,
        null_samples: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d: f64,
    pub p: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub exact: bool,
}

/// Largest combined size for which the permutation distribution of `D` is
/// enumerated exactly.
pub const KS_EXACT_MAX: usize = 12;

fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// `Q(λ) = 2 Σ (-1)^(k-1) exp(-2 k² λ²)`, 100 terms.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sample KS test. Small samples enumerate every split of the pooled
/// values; otherwise the asymptotic distribution with
/// `n_eff = n_a n_b / (n_a + n_b)` is used.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, StatsError> {
    check("a", a)?;
    check("b", b)?;
    let d = ks_statistic(a, b);
    let (na, nb) = (a.len(), b.len());
    if na + nb <= KS_EXACT_MAX {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let n = pooled.len();
        let (mut hit, mut all) = (0usize, 0usize);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != na {
                continue;
            }
            let (sa, sb): (Vec<f64>, Vec<f64>) = {
                let mut sa = Vec::with_capacity(na);
                let mut sb = Vec::with_capacity(nb);
                for (i, &x) in pooled.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        sa.push(x);
                    } else {
                        sb.push(x);
                    }
                }
                (sa, sb)
            };
            all += 1;
            if ks_statistic(&sa, &sb) >= d - 1e-12 {
                hit += 1;
            }
        }
        return Ok(KsResult {
            d,
            p: hit as f64 / all as f64,
            n_a: na,
            n_b: nb,
            exact: true,
        });
    }
    let n_eff = (na * nb) as f64 / (na + nb) as f64;
    Ok(KsResult {
        d,
        p: kolmogorov_survival(n_eff.sqrt() * d),
        n_a: na,
        n_b: nb,
        exact: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl SummaryStats {
    pub fn new(mean: f64, sd: f64, n: usize) -> Self {
        SummaryStats { mean, sd, n }
    }

    /// Mean, sample standard deviation (`n - 1`) and count.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let m = mean(values);
        let sd = if values.len() > 1 {
            (values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(SummaryStats::new(m, sd, values.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_two_sided: f64,
}

/// Welch's t for `mean_b - mean_a` with Welch–Satterthwaite degrees of
/// freedom. With both standard deviations zero, `t` is 0 (equal means) or
/// infinite with `p = 0`.
pub fn welch_t(a: SummaryStats, b: SummaryStats) -> Result<WelchResult, StatsError> {
    if a.n < 2 || b.n < 2 {
        return Err(StatsError::TooFew);
    }
    let va = a.sd * a.sd / a.n as f64;
    let vb = b.sd * b.sd / b.n as f64;
    let diff = b.mean - a.mean;
    if va + vb == 0.0 {
        return Ok(if diff == 0.0 {
            WelchResult { t: 0.0, df: f64::NAN, p_two_sided: 1.0 }
        } else {
            WelchResult {
                t: diff.signum() * f64::INFINITY,
                df: f64::NAN,
                p_two_sided: 0.0,
            }
        });
    }
    let t = diff / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (a.n - 1) as f64 + vb * vb / (b.n - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = 2.0 * dist.cdf(-t.abs());
    Ok(WelchResult { t, df, p_two_sided: p.min(1.0) })
}

/// Headway statistics per queue position.
pub fn headways_by_position(records: &[HeadwayRecord]) -> BTreeMap<usize, SummaryStats> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.queue_position).or_default().push(r.headway);
    }
    groups
        .into_iter()
        .filter_map(|(k, v)| SummaryStats::of(&v).map(|s| (k, s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram on `[lo, hi]`; the last bin is closed and values
/// outside the range are dropped.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        if !(v >= lo && v <= hi) {
            continue;
        }
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Histogram { edges, counts }
}
