//! End-to-end comparison of an error-bearing data set against a reference
//! data set: configuration, the individual stages and artifact output.
//!
//! Stages run sequentially; parallelism lives inside the DTW, SIMEX and
//! permutation kernels, all of which are independent of thread count.

use crate::archive::{write_archive, ArchiveError};
use crate::dtw::{pooled_variances, DtwConfig};
use crate::error_model::{
    derive_error_set, fit_bivariate_error, load_error_samples, mardia_tests, DerivedErrorSet, ErrorModel2D,
    ErrorModelFile, ErrorSamples, SpeedErrorSource,
};
use crate::extract::{
    build_lc_episode, detect_lane_changes, extract_cf_pairs, extract_discharge_headways, extract_stop_segments,
    CfConfig, CfEpisode, HeadwayConfig, HeadwayRecord, LaneChangeEvent, LaneConfig, LaneContext, LcEpisode,
    LcRejection, PairType, StopSegment, StopThresholds,
};
use crate::markov::{
    build_transition_matrix, score_segments, write_matrix, write_scores, write_step_probs, BinSpec, SegmentScore,
    TransitionMatrix, DEFAULT_SMOOTHING,
};
use crate::model::{load_lane_map, load_trajectories, TrajectoryFormat, TrajectorySet, VehicleKind, DEFAULT_DT};
use crate::report::{
    mean_of, sha256_file, ComparisonReport, DistanceSection, ErrorSummary, ExtractionCounts, HeadwaySection,
    InputDigest, MarkovSection, PairTypeSummary, PositionSummary, Provenance, ScoreSummary, SectionStatus,
    TestRecord, REPORT_SCHEMA,
};
use crate::rng::derive_seed;
use crate::series::MultiSeries;
use crate::simex::{
    cross_pairs, simex_pairs, within_pairs, ErrorGenerator, NoiseRule, SimexConfig, SimexInput, SimexPair, CF_RULES,
    LC_RULES,
};
use crate::stats::{headways_by_position, histogram, ks_two_sample, permutation_test_mean_diff, welch_t, SummaryStats};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("stage {stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: &'static str, cause: impl Display) -> Self {
        PipelineError {
            stage,
            message: cause.to_string(),
        }
    }
}

pub trait StageResult<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError>;
}

impl<T, E: Display> StageResult<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::new(stage, e))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<TrajectoryFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    Gaussian,
    Empirical,
}

/// Where the error model comes from: a sample file, a fitted model file,
/// or neither (the observed data are treated as error-free).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Speed error standard deviations (x, y) for sample files without a
    /// duration column.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speed_sigma: Option<[f64; 2]>,
    pub generator: GeneratorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Headway,
    Markov,
    Cf,
    Lc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkovConfig {
    pub smoothing: f64,
    pub bins: BinSpec,
}

impl Default for MarkovConfig {
    fn default() -> Self {
        MarkovConfig {
            smoothing: DEFAULT_SMOOTHING,
            bins: BinSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceConfig {
    /// Sakoe–Chiba half-width in frames; `None` is unconstrained.
    pub band: Option<usize>,
    /// Keep only episodes whose subject (follower or ego) is of this kind.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject_kind: Option<VehicleKind>,
    /// Keep at most this many episodes per data set, in extraction order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_episodes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    pub permutations: usize,
    pub histogram_bins: usize,
    pub keep_null: bool,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            permutations: 10_000,
            histogram_bins: 20,
            keep_null: false,
        }
    }
}

fn default_analyses() -> Vec<Analysis> {
    vec![Analysis::Headway, Analysis::Markov, Analysis::Cf, Analysis::Lc]
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

fn default_lc_distance() -> DistanceConfig {
    DistanceConfig {
        band: Some(2),
        ..DistanceConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Ground-truth data set.
    #[serde(default)]
    pub reference: DatasetConfig,
    /// Error-bearing data set.
    #[serde(default)]
    pub observed: DatasetConfig,
    #[serde(default)]
    pub error: ErrorConfig,
    #[serde(default = "default_analyses")]
    pub analyses: Vec<Analysis>,
    #[serde(default)]
    pub cf: CfConfig,
    #[serde(default)]
    pub stop: StopThresholds,
    #[serde(default)]
    pub lanes: LaneConfig,
    #[serde(default)]
    pub headway: HeadwayConfig,
    #[serde(default)]
    pub markov: MarkovConfig,
    #[serde(default)]
    pub cf_dtw: DistanceConfig,
    #[serde(default = "default_lc_distance")]
    pub lc_dtw: DistanceConfig,
    #[serde(default)]
    pub simex: SimexConfig,
    #[serde(default)]
    pub tests: TestConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::new(DatasetConfig::default(), DatasetConfig::default())
    }
}

impl PipelineConfig {
    pub fn new(reference: DatasetConfig, observed: DatasetConfig) -> Self {
        PipelineConfig {
            seed: 0,
            dt: DEFAULT_DT,
            reference,
            observed,
            error: ErrorConfig::default(),
            analyses: default_analyses(),
            cf: CfConfig::default(),
            stop: StopThresholds::default(),
            lanes: LaneConfig::default(),
            headway: HeadwayConfig::default(),
            markov: MarkovConfig::default(),
            cf_dtw: DistanceConfig::default(),
            lc_dtw: default_lc_distance(),
            simex: SimexConfig::default(),
            tests: TestConfig::default(),
        }
    }

    /// Propagates the shared time step and master seed into the stage
    /// blocks.
    pub fn normalized(mut self) -> Self {
        self.cf.dt = self.dt;
        self.lanes.dt = self.dt;
        self.headway.dt = self.dt;
        self.simex.seed = self.seed;
        self.analyses.sort();
        self.analyses.dedup();
        self
    }

    pub fn runs(&self, a: Analysis) -> bool {
        self.analyses.contains(&a)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (role, d) in [("reference", &self.reference), ("observed", &self.observed)] {
            if d.path.as_os_str().is_empty() {
                return Err(PipelineError::new("config", format!("{role}.path is required")));
            }
        }
        self.validate_stages()
    }

    /// Checks the stage blocks only; data set paths may be absent.
    pub fn validate_stages(&self) -> Result<(), PipelineError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(PipelineError::new("config", format!("dt must be positive, got {}", self.dt)));
        }
        if self.error.samples.is_some() && self.error.model.is_some() {
            return Err(PipelineError::new("config", "error.samples and error.model are mutually exclusive"));
        }
        if self.tests.permutations == 0 {
            return Err(PipelineError::new("config", "tests.permutations must be at least 1"));
        }
        self.simex.validate().stage("config")
    }
}

/// Reads a TOML or JSON configuration, chosen by file extension.
pub fn load_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::new("config", format!("{}: {e}", path.display())))?;
    parse_config(&text, path.extension().and_then(|e| e.to_str()) == Some("json"))
}

pub fn parse_config(text: &str, json: bool) -> Result<PipelineConfig, PipelineError> {
    if json {
        serde_json::from_str(text).stage("config")
    } else {
        toml::from_str(text).stage("config")
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn digest(role: &str, base: &Path, p: &Path) -> Result<InputDigest, PipelineError> {
    let full = resolve(base, p);
    Ok(InputDigest {
        role: role.to_owned(),
        path: p.display().to_string(),
        sha256: sha256_file(&full).map_err(|e| PipelineError::new("load", format!("{}: {e}", full.display())))?,
    })
}

/// Loads, resamples to `dt` and attaches the lane map when one is named.
pub fn load_dataset(cfg: &DatasetConfig, base: &Path, dt: f64) -> Result<TrajectorySet, PipelineError> {
    let path = resolve(base, &cfg.path);
    let format = cfg.format.unwrap_or_else(|| TrajectoryFormat::from_path(&path));
    let mut set = load_trajectories(&path, format).stage("load")?;
    if let Some(m) = &cfg.map {
        set = set.with_map(load_lane_map(&resolve(base, m)).stage("load")?);
    }
    set.prepared(dt).stage("load")
}

/// Every episode type extracted from one data set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub cf: Vec<CfEpisode>,
    pub stops: Vec<StopSegment>,
    pub lane_changes: Vec<LaneChangeEvent>,
    pub lc: Vec<LcEpisode>,
    pub lc_rejected: BTreeMap<String, usize>,
    pub headways: Vec<HeadwayRecord>,
}

impl Extraction {
    pub fn counts(&self, vehicles: usize) -> ExtractionCounts {
        ExtractionCounts {
            vehicles,
            cf_episodes: self.cf.len(),
            stop_segments: self.stops.len(),
            lane_changes: self.lane_changes.len(),
            lc_episodes: self.lc.len(),
            lc_rejected: self.lc_rejected.clone(),
            headways: self.headways.len(),
        }
    }
}

fn rejection_key(r: LcRejection) -> &'static str {
    match r {
        LcRejection::BoundaryTruncation => "boundary_truncation",
        LcRejection::MissingLead => "missing_lead",
        LcRejection::MissingLag => "missing_lag",
        LcRejection::UnknownLane => "unknown_lane",
    }
}

/// Lane-change events and their episodes. Needs a lane map.
pub fn extract_lane_changes(
    set: &TrajectorySet,
    ctx: &LaneContext<'_>,
    cfg: &LaneConfig,
) -> (Vec<LaneChangeEvent>, Vec<LcEpisode>, BTreeMap<String, usize>) {
    let mut events = Vec::new();
    for traj in set.iter() {
        if let Some(a) = ctx.assignments.get(&traj.vehicle_id) {
            events.extend(detect_lane_changes(traj, a, ctx.map, cfg));
        }
    }
    let mut episodes = Vec::new();
    let mut rejected = BTreeMap::new();
    for ev in &events {
        match build_lc_episode(ev, set, ctx, cfg) {
            Ok(ep) => episodes.push(ep),
            Err(r) => *rejected.entry(rejection_key(r).to_owned()).or_insert(0) += 1,
        }
    }
    (events, episodes, rejected)
}

pub fn extract_all(set: &TrajectorySet, cfg: &PipelineConfig) -> Extraction {
    let ctx = set.map.as_ref().map(|m| LaneContext::new(set, m, cfg.lanes.max_distance_m));
    let cf = extract_cf_pairs(set, ctx.as_ref(), &cfg.cf);
    let stops = extract_stop_segments(&cf, &cfg.stop);
    let mut out = Extraction {
        cf,
        stops,
        ..Extraction::default()
    };
    if let Some(ctx) = &ctx {
        let (events, lc, rejected) = extract_lane_changes(set, ctx, &cfg.lanes);
        out.lane_changes = events;
        out.lc = lc;
        out.lc_rejected = rejected;
        out.headways = extract_discharge_headways(set, ctx, &cfg.headway);
    }
    out
}

/// Resolved error model: what the Markov scorer and the SIMEX engine use.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorContext {
    pub derived: DerivedErrorSet,
    pub generator: ErrorGenerator,
    pub summary: ErrorSummary,
    pub file: Option<ErrorModelFile>,
}

/// Fits the position model, runs the normality tests and derives the
/// channel variances.
pub fn fit_error_model(samples: &ErrorSamples, speed_sigma: Option<[f64; 2]>) -> Result<ErrorModelFile, PipelineError> {
    let position = fit_bivariate_error(&samples.errors).stage("error-model")?;
    let mardia = mardia_tests(&samples.errors).ok();
    let speed = match (&samples.durations, speed_sigma) {
        (Some(d), _) => SpeedErrorSource::Samples {
            errors: &samples.errors,
            durations: d,
        },
        (None, Some(s)) => SpeedErrorSource::Model(ErrorModel2D::new([0.0; 2], s, 0.0, 0).stage("error-model")?),
        (None, None) => {
            return Err(PipelineError::new(
                "error-model",
                "samples have no duration column and no speed_sigma is configured",
            ))
        }
    };
    let derived = derive_error_set(&position, speed).stage("error-model")?;
    Ok(ErrorModelFile::new(derived, mardia))
}

pub fn resolve_error(cfg: &ErrorConfig, base: &Path) -> Result<ErrorContext, PipelineError> {
    let (source, file, samples) = match (&cfg.samples, &cfg.model) {
        (Some(p), _) => {
            let samples = load_error_samples(&resolve(base, p)).stage("error-model")?;
            ("samples", Some(fit_error_model(&samples, cfg.speed_sigma)?), Some(samples))
        }
        (None, Some(p)) => {
            let path = resolve(base, p);
            let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::new("error-model", format!("{}: {e}", path.display())))?;
            let file: ErrorModelFile = serde_json::from_str(&text).stage("error-model")?;
            ("model", Some(file), None)
        }
        (None, None) => ("none", None, None),
    };
    let derived = file.as_ref().map_or_else(DerivedErrorSet::zero, |f| f.derived);
    let generator = match (cfg.generator, &samples) {
        (GeneratorKind::Gaussian, _) => ErrorGenerator::Gaussian(derived),
        (GeneratorKind::Empirical, Some(s)) => ErrorGenerator::empirical(s, derived).stage("error-model")?,
        (GeneratorKind::Empirical, None) => {
            return Err(PipelineError::new("error-model", "the empirical generator needs an error sample file"))
        }
    };
    let summary = ErrorSummary {
        source: source.to_owned(),
        generator: match cfg.generator {
            GeneratorKind::Gaussian => "gaussian",
            GeneratorKind::Empirical => "empirical",
        }
        .to_owned(),
        position: derived.position,
        speed: derived.speed,
        spacing_var: derived.spacing_var,
        relative_speed_sd: derived.relative_speed_sd(),
        mardia: file.as_ref().and_then(|f| f.mardia),
    };
    Ok(ErrorContext {
        derived,
        generator,
        summary,
        file,
    })
}

fn ks_record(group: impl Into<String>, ks: &crate::stats::KsResult) -> TestRecord {
    TestRecord {
        test: "ks".to_owned(),
        group: group.into(),
        statistic: ks.d,
        p: ks.p,
        b_or_n: ks.n_a + ks.n_b,
        config: serde_json::json!({ "exact": ks.exact }),
    }
}

/// Welch tests per queue position and KS tests per pair type, reference
/// against observed.
pub fn headway_section(reference: &[HeadwayRecord], observed: &[HeadwayRecord]) -> (HeadwaySection, Vec<TestRecord>) {
    let mut tests = Vec::new();
    let rp = headways_by_position(reference);
    let op = headways_by_position(observed);
    let positions: BTreeSet<usize> = rp.keys().chain(op.keys()).copied().collect();
    let by_position = positions
        .into_iter()
        .map(|q| {
            let (r, o) = (rp.get(&q).copied(), op.get(&q).copied());
            let welch = match (r, o) {
                (Some(r), Some(o)) => welch_t(r, o).ok(),
                _ => None,
            };
            if let Some(w) = welch {
                tests.push(TestRecord {
                    test: "welch".to_owned(),
                    group: format!("position_{q}"),
                    statistic: w.t,
                    p: w.p_two_sided,
                    b_or_n: r.map_or(0, |s| s.n) + o.map_or(0, |s| s.n),
                    config: serde_json::json!({ "df": w.df }),
                });
            }
            PositionSummary {
                queue_position: q,
                reference: r,
                observed: o,
                welch,
            }
        })
        .collect();

    let group = |records: &[HeadwayRecord]| {
        let mut m: BTreeMap<PairType, Vec<f64>> = BTreeMap::new();
        for r in records {
            m.entry(r.pair_type).or_default().push(r.headway);
        }
        m
    };
    let (rt, ot) = (group(reference), group(observed));
    let types: BTreeSet<PairType> = rt.keys().chain(ot.keys()).copied().collect();
    let by_pair_type = types
        .into_iter()
        .map(|pt| {
            let (r, o) = (rt.get(&pt), ot.get(&pt));
            let ks = match (r, o) {
                (Some(r), Some(o)) => ks_two_sample(r, o).ok(),
                _ => None,
            };
            if let Some(k) = &ks {
                tests.push(ks_record(pt.as_str(), k));
            }
            PairTypeSummary {
                pair_type: pt.as_str().to_owned(),
                reference: r.and_then(|v| SummaryStats::of(v)),
                observed: o.and_then(|v| SummaryStats::of(v)),
                ks,
            }
        })
        .collect();
    (HeadwaySection { by_position, by_pair_type }, tests)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovOutcome {
    pub section: MarkovSection,
    pub matrix: TransitionMatrix,
    pub reference_scores: Vec<SegmentScore>,
    pub observed_scores: Vec<SegmentScore>,
    pub tests: Vec<TestRecord>,
}

fn score_summary(scores: &[SegmentScore], bins: usize) -> ScoreSummary {
    let geoms: Vec<f64> = scores.iter().map(|s| s.geom_mean).collect();
    let steps: Vec<f64> = scores.iter().flat_map(|s| s.step_probs.iter().copied()).collect();
    ScoreSummary {
        segments: scores.len(),
        mean_geom: mean_of(&geoms),
        mean_step: mean_of(&steps),
        geom_hist: histogram(&geoms, 0.0, 1.0, bins),
        step_hist: histogram(&steps, 0.0, 1.0, bins),
    }
}

/// Trains the transition model on reference stop segments and scores both
/// sides: reference segments as exact, observed ones under `err`.
pub fn markov_section(
    reference: &[StopSegment],
    observed: &[StopSegment],
    err: &DerivedErrorSet,
    cfg: &MarkovConfig,
    bins: usize,
) -> Result<MarkovOutcome, PipelineError> {
    let matrix = build_transition_matrix(reference.iter().map(|s| s.states.as_slice()), &cfg.bins, cfg.smoothing).stage("markov")?;
    fn segs(v: &[StopSegment]) -> Vec<(String, &[crate::extract::CfState])> {
        v.iter().map(|s| (s.id(), s.states.as_slice())).collect()
    }
    let reference_scores = score_segments(segs(reference), &matrix, &DerivedErrorSet::zero()).stage("markov")?;
    let observed_scores = score_segments(segs(observed), &matrix, err).stage("markov")?;
    let mut tests = Vec::new();
    let geoms = |s: &[SegmentScore]| s.iter().map(|x| x.geom_mean).collect::<Vec<_>>();
    let ks = ks_two_sample(&geoms(&reference_scores), &geoms(&observed_scores)).ok();
    if let Some(k) = &ks {
        tests.push(ks_record("markov_geom_mean", k));
    }
    let section = MarkovSection {
        training_segments: reference.len(),
        transitions: matrix.n_transitions,
        clamped_frames: matrix.clamped_frames,
        uniform_matrix: matrix.n_transitions == 0,
        smoothing: cfg.smoothing,
        reference: score_summary(&reference_scores, bins),
        observed: score_summary(&observed_scores, bins),
        ks,
    };
    Ok(MarkovOutcome {
        section,
        matrix,
        reference_scores,
        observed_scores,
        tests,
    })
}

/// An episode reduced to what the distance stage needs.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceEpisode {
    pub id: String,
    pub subject_kind: VehicleKind,
    pub series: MultiSeries,
}

pub fn cf_distance_episodes(eps: &[CfEpisode]) -> Vec<DistanceEpisode> {
    eps.iter()
        .map(|e| DistanceEpisode {
            id: e.id(),
            subject_kind: e.follower_kind,
            series: e.series(),
        })
        .collect()
}

pub fn lc_distance_episodes(eps: &[LcEpisode]) -> Vec<DistanceEpisode> {
    eps.iter()
        .map(|e| DistanceEpisode {
            id: e.id(),
            subject_kind: e.ego_kind,
            series: e.series(),
        })
        .collect()
}

pub fn select<'a>(eps: &'a [DistanceEpisode], cfg: &DistanceConfig) -> Vec<&'a DistanceEpisode> {
    eps.iter()
        .filter(|e| cfg.subject_kind.is_none_or(|k| k == e.subject_kind))
        .take(cfg.max_episodes.unwrap_or(usize::MAX))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceOutcome {
    pub section: DistanceSection,
    pub cross: Vec<SimexPair>,
    pub within: Vec<SimexPair>,
    pub reference_ids: Vec<String>,
    pub observed_ids: Vec<String>,
    pub tests: Vec<TestRecord>,
    pub notes: Vec<String>,
}

/// Inverse pooled variances over the union of both episode sets. A
/// channel that is constant everywhere gets unit weight and a note.
pub fn distance_weights<'a>(
    kind: &str,
    series: impl IntoIterator<Item = &'a MultiSeries>,
) -> Result<(Vec<f64>, Vec<String>), PipelineError> {
    let stage: &'static str = if kind == "lc" { "lc" } else { "cf" };
    let mut notes = Vec::new();
    let weights = pooled_variances(series)
        .stage(stage)?
        .iter()
        .enumerate()
        .map(|(c, v)| {
            v.map(|v| 1.0 / v).unwrap_or_else(|| {
                notes.push(format!("{kind}: channel {c} has zero pooled variance; unit weight used"));
                1.0
            })
        })
        .collect();
    Ok((weights, notes))
}

/// Seed of the permutation test for the `cf` or `lc` distance tables.
pub fn permutation_seed(master: u64, kind: &str) -> u64 {
    derive_seed(master, &[if kind == "lc" { 2 } else { 1 }])
}

/// SIMEX-corrected distances for observed × reference (cross) and
/// reference × reference (within) pairs, then the one-sided permutation
/// test of `mean(cross) > mean(within)`.
#[allow(clippy::too_many_arguments)]
pub fn distance_section(
    kind: &str,
    reference: &[DistanceEpisode],
    observed: &[DistanceEpisode],
    rules: &[NoiseRule],
    cfg: &DistanceConfig,
    gen: &ErrorGenerator,
    simex: &SimexConfig,
    tests: &TestConfig,
) -> Result<DistanceOutcome, PipelineError> {
    let stage: &'static str = if kind == "lc" { "lc" } else { "cf" };
    let (refs, obs) = (select(reference, cfg), select(observed, cfg));
    let mut outcome = DistanceOutcome {
        section: DistanceSection::empty("", refs.len(), obs.len(), cfg.band),
        cross: Vec::new(),
        within: Vec::new(),
        reference_ids: refs.iter().map(|e| e.id.clone()).collect(),
        observed_ids: obs.iter().map(|e| e.id.clone()).collect(),
        tests: Vec::new(),
        notes: Vec::new(),
    };
    if refs.len() < 2 || obs.is_empty() {
        outcome.section.reason = Some(format!(
            "need at least 2 reference and 1 observed episode, have {} and {}",
            refs.len(),
            obs.len()
        ));
        return Ok(outcome);
    }
    let (weights, notes) = distance_weights(kind, refs.iter().chain(&obs).map(|e| &e.series))?;
    outcome.notes = notes;
    let dtw = DtwConfig {
        weights: weights.clone(),
        band: cfg.band,
        normalize: true,
    };
    fn inputs<'a>(eps: &[&'a DistanceEpisode], rules: &'a [NoiseRule], error_bearing: bool) -> Vec<SimexInput<'a>> {
        eps.iter()
            .map(|e| SimexInput {
                series: &e.series,
                rules,
                error_bearing,
            })
            .collect()
    }
    let (ri, oi) = (inputs(&refs, rules, false), inputs(&obs, rules, true));
    let cross = simex_pairs(&format!("{kind}_cross"), &oi, &ri, &cross_pairs(oi.len(), ri.len()), &dtw, gen, simex).stage(stage)?;
    let within = simex_pairs(&format!("{kind}_within"), &ri, &ri, &within_pairs(ri.len()), &dtw, gen, simex).stage(stage)?;
    let d0 = |p: &[SimexPair]| p.iter().map(|x| x.result.d0).collect::<Vec<_>>();
    let raw = |p: &[SimexPair]| p.iter().map(|x| x.result.raw).collect::<Vec<_>>();
    let (dc, dw) = (d0(&cross), d0(&within));
    let seed = permutation_seed(simex.seed, kind);
    let perm = permutation_test_mean_diff(&dc, &dw, tests.permutations, seed, tests.keep_null).stage(stage)?;
    outcome.tests.push(TestRecord {
        test: "permutation".to_owned(),
        group: kind.to_owned(),
        statistic: perm.t_obs,
        p: perm.p,
        b_or_n: perm.replicates,
        config: serde_json::json!({
            "lambdas": simex.lambdas,
            "simex_replicates": simex.replicates,
            "mode": simex.mode,
            "band": cfg.band,
            "seed": seed,
        }),
    });
    outcome.section = DistanceSection {
        status: SectionStatus::Ok,
        reason: None,
        n_reference: refs.len(),
        n_observed: obs.len(),
        weights,
        band: cfg.band,
        n_cross: cross.len(),
        n_within: within.len(),
        mean_cross: mean_of(&dc),
        mean_within: mean_of(&dw),
        raw_mean_cross: mean_of(&raw(&cross)),
        raw_mean_within: mean_of(&raw(&within)),
        permutation: Some(perm),
    };
    outcome.cross = cross;
    outcome.within = within;
    Ok(outcome)
}

const ROLES: [&str; 2] = ["reference", "observed"];

#[derive(Serialize)]
struct PairRow<'a> {
    group: &'a str,
    a: usize,
    b: usize,
    a_id: &'a str,
    b_id: &'a str,
    raw: f64,
    d0: f64,
}

/// Writes a distance table as CSV: one row per pair with both episode ids.
pub fn write_pair_table<W: Write>(out: &DistanceOutcome, w: W) -> Result<(), PipelineError> {
    let mut wr = csv::Writer::from_writer(w);
    let rows = out
        .cross
        .iter()
        .map(|p| (p, &out.observed_ids, &out.reference_ids))
        .chain(out.within.iter().map(|p| (p, &out.reference_ids, &out.reference_ids)));
    for (p, left, right) in rows {
        wr.serialize(PairRow {
            group: &p.group,
            a: p.a,
            b: p.b,
            a_id: &left[p.a],
            b_id: &right[p.b],
            raw: p.result.raw,
            d0: p.result.d0,
        })
        .stage("write")?;
    }
    wr.flush().stage("write")
}

pub fn write_headways<W: Write>(records: &[HeadwayRecord], w: W) -> Result<(), PipelineError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r).stage("write")?;
    }
    wr.flush().stage("write")
}

/// SIMEX audit trail, one JSON object per pair.
pub fn write_simex_audit<W: Write>(pairs: &[SimexPair], mut w: W) -> Result<(), PipelineError> {
    for p in pairs {
        serde_json::to_writer(&mut w, p).stage("write")?;
        w.write_all(b"\n").stage("write")?;
    }
    w.flush().stage("write")
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, PipelineError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| PipelineError::new("write", format!("{}: {e}", path.display())))
}

fn archive_err(e: ArchiveError) -> PipelineError {
    PipelineError::new("write", e)
}

pub fn write_extraction(dir: &Path, role: &str, ex: &Extraction, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    write_archive(create(dir, &format!("{role}_cf.jsonl"))?, "cf", &cfg.cf, &ex.cf).map_err(archive_err)?;
    write_archive(create(dir, &format!("{role}_stop.jsonl"))?, "stop", &cfg.stop, &ex.stops).map_err(archive_err)?;
    write_archive(create(dir, &format!("{role}_lc.jsonl"))?, "lc", &cfg.lanes, &ex.lc).map_err(archive_err)?;
    write_headways(&ex.headways, create(dir, &format!("{role}_headways.csv"))?)
}

/// The full run. Relative paths in `cfg` resolve against `base`; when
/// `out` is given every artifact is written there next to `report.json`.
pub fn run_pipeline(cfg: &PipelineConfig, base: &Path, out: Option<&Path>) -> Result<ComparisonReport, PipelineError> {
    let cfg = cfg.clone().normalized();
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::new("write", format!("{}: {e}", dir.display())))?;
    }

    let mut inputs = Vec::new();
    for (role, d) in ROLES.iter().zip([&cfg.reference, &cfg.observed]) {
        inputs.push(digest(role, base, &d.path)?);
        if let Some(m) = &d.map {
            inputs.push(digest(&format!("{role}_map"), base, m)?);
        }
    }
    if let Some(p) = &cfg.error.samples {
        inputs.push(digest("error_samples", base, p)?);
    }
    if let Some(p) = &cfg.error.model {
        inputs.push(digest("error_model", base, p)?);
    }

    let reference = load_dataset(&cfg.reference, base, cfg.dt)?;
    let observed = load_dataset(&cfg.observed, base, cfg.dt)?;
    let rx = extract_all(&reference, &cfg);
    let ox = extract_all(&observed, &cfg);
    let err = resolve_error(&cfg.error, base)?;

    let mut notes = vec![format!("both data sets resampled to dt = {} s", cfg.dt)];
    for (role, set) in ROLES.iter().zip([&reference, &observed]) {
        if set.map.is_none() {
            notes.push(format!("{role}: no lane map, lane-change and headway extraction skipped"));
        }
    }
    if err.summary.source == "none" {
        notes.push("no error model configured; observed data treated as exact".to_owned());
    }
    let mut tests = Vec::new();

    let headway = cfg.runs(Analysis::Headway).then(|| {
        let (section, t) = headway_section(&rx.headways, &ox.headways);
        tests.extend(t);
        section
    });

    let markov = match cfg.runs(Analysis::Markov) {
        true => {
            let m = markov_section(&rx.stops, &ox.stops, &err.derived, &cfg.markov, cfg.tests.histogram_bins)?;
            if m.section.uniform_matrix {
                notes.push("markov: no training transitions, matrix rows are uniform".to_owned());
            }
            tests.extend(m.tests.iter().cloned());
            if let Some(dir) = out {
                write_matrix(&m.matrix, create(dir, "markov_matrix.csv")?).stage("write")?;
                for (role, s) in ROLES.iter().zip([&m.reference_scores, &m.observed_scores]) {
                    write_scores(s, create(dir, &format!("{role}_markov_scores.csv"))?).stage("write")?;
                    write_step_probs(s, create(dir, &format!("{role}_markov_steps.csv"))?).stage("write")?;
                }
            }
            Some(m.section)
        }
        false => None,
    };

    let mut run_distances = |kind: &str, r: Vec<DistanceEpisode>, o: Vec<DistanceEpisode>, rules, dcfg| {
        let d = distance_section(kind, &r, &o, rules, dcfg, &err.generator, &cfg.simex, &cfg.tests)?;
        tests.extend(d.tests.iter().cloned());
        notes.extend(d.notes.iter().cloned());
        if let Some(dir) = out {
            write_pair_table(&d, create(dir, &format!("{kind}_pairs.csv"))?)?;
            let audit: Vec<SimexPair> = d.cross.iter().chain(&d.within).cloned().collect();
            write_simex_audit(&audit, create(dir, &format!("{kind}_simex.jsonl"))?)?;
        }
        Ok::<_, PipelineError>(d.section)
    };
    let cf = match cfg.runs(Analysis::Cf) {
        true => Some(run_distances("cf", cf_distance_episodes(&rx.cf), cf_distance_episodes(&ox.cf), &CF_RULES, &cfg.cf_dtw)?),
        false => None,
    };
    let lc = match cfg.runs(Analysis::Lc) {
        true => Some(run_distances("lc", lc_distance_episodes(&rx.lc), lc_distance_episodes(&ox.lc), &LC_RULES, &cfg.lc_dtw)?),
        false => None,
    };

    let report = ComparisonReport {
        schema: REPORT_SCHEMA.to_owned(),
        provenance: Provenance {
            tool: "trajcmp".to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed: cfg.seed,
            dt: cfg.dt,
            inputs,
        },
        config: serde_json::to_value(&cfg).stage("report")?,
        extraction: ROLES
            .iter()
            .zip([(&rx, &reference), (&ox, &observed)])
            .map(|(role, (x, set))| (role.to_string(), x.counts(set.len())))
            .collect(),
        error_model: err.summary.clone(),
        headway,
        markov,
        cf,
        lc,
        tests,
        notes,
    };

    if let Some(dir) = out {
        for (role, x) in ROLES.iter().zip([&rx, &ox]) {
            write_extraction(dir, role, x, &cfg)?;
        }
        if let Some(f) = &err.file {
            let mut w = create(dir, "error_model.json")?;
            serde_json::to_writer_pretty(&mut w, f).stage("write")?;
            w.write_all(b"\n").stage("write")?;
        }
        let mut w = create(dir, "report.json")?;
        report.write_json(&mut w).stage("write")?;
        w.flush().stage("write")?;
    }
    Ok(report)
}
