//! Error-aware comparison of microscopic driving behavior between two
//! vehicle-trajectory data sets.
//!
//! The crate covers the whole chain: loading and resampling trajectories,
//! extracting car-following, decelerating-to-stop, lane-change and
//! queue-discharge episodes, modelling measurement error, scoring episodes
//! against a Markov transition model, SIMEX-corrected multivariate DTW
//! distances and the permutation / Kolmogorov–Smirnov / Welch tests used to
//! decide whether one data set falls inside the behavioral envelope of the
//! other.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod model;
pub mod series;
pub mod rng;
pub mod error_model;
pub mod dtw;
pub mod extract;
pub mod markov;
pub mod simex;
pub mod stats;
pub mod synth;
pub mod archive;
pub mod report;
pub mod pipeline;

pub use model::{
    Frame, Lane, LaneBand, LaneMap, ModelError, Trajectory, TrajectoryFormat, TrajectorySet,
    VehicleKind, DEFAULT_DT,
};
pub use series::MultiSeries;
