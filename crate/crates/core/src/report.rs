//! The comparison report and its provenance.

use crate::error_model::{ErrorModel2D, MardiaResult};
use crate::stats::{Histogram, KsResult, PermTestResult, SummaryStats, WelchResult};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const REPORT_SCHEMA: &str = "trajcmp.report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    /// The path as written in the configuration.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub dt: f64,
    pub inputs: Vec<InputDigest>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionCounts {
    pub vehicles: usize,
    pub cf_episodes: usize,
    pub stop_segments: usize,
    pub lane_changes: usize,
    pub lc_episodes: usize,
    pub lc_rejected: BTreeMap<String, usize>,
    pub headways: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    /// `samples`, `model` or `none`.
    pub source: String,
    pub generator: String,
    pub position: ErrorModel2D,
    pub speed: ErrorModel2D,
    pub spacing_var: f64,
    pub relative_speed_sd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mardia: Option<MardiaResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSummary {
    pub queue_position: usize,
    pub reference: Option<SummaryStats>,
    pub observed: Option<SummaryStats>,
    pub welch: Option<WelchResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTypeSummary {
    pub pair_type: String,
    pub reference: Option<SummaryStats>,
    pub observed: Option<SummaryStats>,
    pub ks: Option<KsResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadwaySection {
    pub by_position: Vec<PositionSummary>,
    pub by_pair_type: Vec<PairTypeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub segments: usize,
    pub mean_geom: Option<f64>,
    pub mean_step: Option<f64>,
    pub geom_hist: Histogram,
    pub step_hist: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSection {
    pub training_segments: usize,
    pub transitions: u64,
    pub clamped_frames: u64,
    /// No training transitions: every row is uniform.
    pub uniform_matrix: bool,
    pub smoothing: f64,
    pub reference: ScoreSummary,
    pub observed: ScoreSummary,
    pub ks: Option<KsResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionStatus {
    Ok,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSection {
    pub status: SectionStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub n_reference: usize,
    pub n_observed: usize,
    pub weights: Vec<f64>,
    pub band: Option<usize>,
    pub n_cross: usize,
    pub n_within: usize,
    pub mean_cross: Option<f64>,
    pub mean_within: Option<f64>,
    pub raw_mean_cross: Option<f64>,
    pub raw_mean_within: Option<f64>,
    pub permutation: Option<PermTestResult>,
}

impl DistanceSection {
    pub fn empty(reason: impl Into<String>, n_reference: usize, n_observed: usize, band: Option<usize>) -> Self {
        DistanceSection {
            status: SectionStatus::Empty,
            reason: Some(reason.into()),
            n_reference,
            n_observed,
            weights: Vec::new(),
            band,
            n_cross: 0,
            n_within: 0,
            mean_cross: None,
            mean_within: None,
            raw_mean_cross: None,
            raw_mean_within: None,
            permutation: None,
        }
    }
}

/// One hypothesis test in flat form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub test: String,
    pub group: String,
    pub statistic: f64,
    pub p: f64,
    #[serde(rename = "B_or_n")]
    pub b_or_n: usize,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema: String,
    pub provenance: Provenance,
    pub config: serde_json::Value,
    pub extraction: BTreeMap<String, ExtractionCounts>,
    pub error_model: ErrorSummary,
    pub headway: Option<HeadwaySection>,
    pub markov: Option<MarkovSection>,
    pub cf: Option<DistanceSection>,
    pub lc: Option<DistanceSection>,
    pub tests: Vec<TestRecord>,
    pub notes: Vec<String>,
}

impl ComparisonReport {
    /// Pretty JSON with a trailing newline.
    pub fn write_json<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        serde_json::to_writer_pretty(&mut w, self).map_err(std::io::Error::other)?;
        w.write_all(b"\n")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub(crate) fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_input() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn empty_section_has_reason_and_no_means() {
        let s = DistanceSection::empty("no lane changes", 0, 3, Some(2));
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["status"], "empty");
        assert_eq!(v["reason"], "no lane changes");
        assert!(v["mean_cross"].is_null());
    }

    #[test]
    fn test_record_uses_flat_field_names() {
        let r = TestRecord {
            test: "ks".into(),
            group: "HV_HV".into(),
            statistic: 0.5,
            p: 0.25,
            b_or_n: 12,
            config: serde_json::Value::Null,
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["B_or_n"], 12);
    }
}
