#![allow(dead_code)]

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use std::path::{Path, PathBuf};
use trajcmp_core::error_model::ErrorModel2D;
use trajcmp_core::model::write_trajectories;
use trajcmp_core::synth::{combine, demo_scripts};
use trajcmp_core::{TrajectoryFormat, TrajectorySet};

pub const CONFIG: &str = r#"
seed = 7

[reference]
path = "reference.jsonl"
map = "map.json"

[observed]
path = "observed.jsonl"
map = "map.json"

[error]
samples = "errors.csv"

[simex]
replicates = 6

[tests]
permutations = 499
"#;

pub fn observed_scene() -> TrajectorySet {
    let scripts: Vec<_> = demo_scripts(1)
        .into_iter()
        .enumerate()
        .map(|(k, mut s)| {
            s.noise = Some(ErrorModel2D::new([0.0, 0.0], [0.02, 0.01], 0.0, 0).unwrap());
            s.smoother = Some(5);
            s.seed = 100 + k as u64;
            s
        })
        .collect();
    combine(&scripts, 40.0).unwrap().observed
}

pub fn reference_scene() -> TrajectorySet {
    combine(&demo_scripts(0), 40.0).unwrap().truth
}

pub fn write_set(set: &TrajectorySet, path: &Path) {
    write_trajectories(set, path, TrajectoryFormat::Jsonl).unwrap();
}

pub fn write_map(set: &TrajectorySet, path: &Path) {
    std::fs::write(path, serde_json::to_string_pretty(set.map.as_ref().unwrap()).unwrap()).unwrap();
}

/// Seeded error samples: `ex,ey,duration_s`.
pub fn error_samples_csv(n: usize, sigma: [f64; 2], seed: u64) -> String {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let nx = Normal::new(0.0, sigma[0]).unwrap();
    let ny = Normal::new(0.0, sigma[1]).unwrap();
    let mut out = String::from("ex,ey,duration_s\n");
    for k in 0..n {
        out.push_str(&format!("{},{},{}\n", nx.sample(&mut rng), ny.sample(&mut rng), 2.0 + (k % 5) as f64));
    }
    out
}

/// Writes the demo comparison (data sets, map, error samples, config) and
/// returns the config path.
pub fn write_fixture(dir: &Path) -> PathBuf {
    let reference = reference_scene();
    write_set(&reference, &dir.join("reference.jsonl"));
    write_set(&observed_scene(), &dir.join("observed.jsonl"));
    write_map(&reference, &dir.join("map.json"));
    std::fs::write(dir.join("errors.csv"), error_samples_csv(60, [0.02, 0.01], 11)).unwrap();
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    cfg
}

pub fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}
