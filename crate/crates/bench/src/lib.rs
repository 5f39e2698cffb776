//! Seeded inputs for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajcmp_core::extract::CfState;
use trajcmp_core::MultiSeries;

/// Random walk with `channels` channels and unit-variance steps.
pub fn random_walk(len: usize, channels: usize, seed: u64) -> MultiSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; channels];
    let mut data = Vec::with_capacity(len * channels);
    for _ in 0..len {
        for v in x.iter_mut() {
            *v += rng.random_range(-1.0..1.0);
        }
        data.extend_from_slice(&x);
    }
    MultiSeries::new(channels, data).expect("well-formed series")
}

/// A braking approach to a stopped leader, sampled at 10 Hz.
pub fn braking_states(len: usize) -> Vec<CfState> {
    (0..len)
        .map(|k| {
            let f = 1.0 - k as f64 / len as f64;
            CfState::new(4.0 + 20.0 * f, -8.0 * f, 8.0 * f)
        })
        .collect()
}
