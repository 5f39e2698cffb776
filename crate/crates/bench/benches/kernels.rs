use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use trajcmp_bench::{braking_states, random_walk};
use trajcmp_core::dtw::{dtw_distance, DtwConfig};
use trajcmp_core::error_model::{derive_error_set, ErrorModel2D, SpeedErrorSource};
use trajcmp_core::markov::{build_transition_matrix, geometric_mean_score, state_bin_distribution, transition_probability, BinSpec, DEFAULT_SMOOTHING};
use trajcmp_core::simex::{simex_distance, ErrorGenerator, SimexConfig, SimexInput, CF_RULES};

fn error_set() -> trajcmp_core::error_model::DerivedErrorSet {
    let pos = ErrorModel2D::new([0.0, 0.0], [1.075, 0.530], -0.291, 60).unwrap();
    let speed = ErrorModel2D::new([0.0, 0.0], [0.0636, 0.03], 0.0, 60).unwrap();
    derive_error_set(&pos, SpeedErrorSource::Model(speed)).unwrap()
}

fn dtw(c: &mut Criterion) {
    let (a, b) = (random_walk(150, 3, 1), random_walk(170, 3, 2));
    let cfg = DtwConfig::unit(3);
    c.bench_function("dtw_cf_150x170", |bench| bench.iter(|| dtw_distance(black_box(&a), black_box(&b), &cfg).unwrap()));
    let (a, b) = (random_walk(61, 6, 3), random_walk(61, 6, 4));
    let cfg = DtwConfig::unit(6).with_band(Some(2));
    c.bench_function("dtw_lc_61_band2", |bench| bench.iter(|| dtw_distance(black_box(&a), black_box(&b), &cfg).unwrap()));
}

fn markov(c: &mut Criterion) {
    let spec = BinSpec::default();
    let train: Vec<Vec<_>> = (60..100).map(braking_states).collect();
    let p = build_transition_matrix(train.iter().map(Vec::as_slice), &spec, DEFAULT_SMOOTHING).unwrap();
    let err = error_set();
    let states = braking_states(80);
    let (q0, q1) = (state_bin_distribution(states[10], &err, &spec), state_bin_distribution(states[11], &err, &spec));
    c.bench_function("transition_probability", |bench| bench.iter(|| transition_probability(black_box(&q0), black_box(&q1), &p)));
    c.bench_function("geometric_mean_score_80", |bench| bench.iter(|| geometric_mean_score(black_box(&states), &p, &err).unwrap()));
}

fn simex(c: &mut Criterion) {
    let (a, b) = (random_walk(100, 3, 5), random_walk(100, 3, 6));
    let gen = ErrorGenerator::Gaussian(error_set());
    let cfg = SimexConfig {
        replicates: 10,
        ..SimexConfig::default()
    };
    let dtw = DtwConfig::unit(3);
    let ia = SimexInput { series: &a, rules: &CF_RULES, error_bearing: true };
    let ib = SimexInput { series: &b, rules: &CF_RULES, error_bearing: false };
    c.bench_function("simex_distance_b10", |bench| bench.iter(|| simex_distance(ia, ib, &dtw, &gen, &cfg, &[0, 1]).unwrap()));
}

criterion_group!(benches, dtw, markov, simex);
criterion_main!(benches);
