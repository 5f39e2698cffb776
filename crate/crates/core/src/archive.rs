//! Episode archives: JSON Lines with one header line followed by one
//! record per line.
//!
//! The header carries a schema tag, the record kind and an echo of the
//! configuration that produced the records, so an archive can be audited
//! without the run that wrote it.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

pub const ARCHIVE_SCHEMA: &str = "trajcmp.archive/1";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("archive is empty")]
    MissingHeader,
    #[error("expected schema {ARCHIVE_SCHEMA}, found {0}")]
    Schema(String),
    #[error("expected a {expected} archive, found {found}")]
    Kind { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub schema: String,
    pub kind: String,
    pub count: usize,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn write_archive<T: Serialize, W: Write>(
    mut w: W,
    kind: &str,
    config: &impl Serialize,
    records: &[T],
) -> Result<(), ArchiveError> {
    let header = ArchiveHeader {
        schema: ARCHIVE_SCHEMA.to_owned(),
        kind: kind.to_owned(),
        count: records.len(),
        config: serde_json::to_value(config).map_err(|e| ArchiveError::Parse { line: 0, message: e.to_string() })?,
    };
    json_line(&mut w, &header)?;
    for r in records {
        json_line(&mut w, r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an archive of `kind`. Blank lines are ignored.
pub fn read_archive<T: DeserializeOwned, R: BufRead>(r: R, kind: &str) -> Result<(ArchiveHeader, Vec<T>), ArchiveError> {
    let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let (_, first) = lines.next().ok_or(ArchiveError::MissingHeader)?;
    let header: ArchiveHeader = serde_json::from_str(&first?).map_err(|e| ArchiveError::Parse { line: 1, message: e.to_string() })?;
    if header.schema != ARCHIVE_SCHEMA {
        return Err(ArchiveError::Schema(header.schema));
    }
    if header.kind != kind {
        return Err(ArchiveError::Kind {
            expected: kind.to_owned(),
            found: header.kind,
        });
    }
    let mut out = Vec::with_capacity(header.count);
    for (i, l) in lines {
        let rec = serde_json::from_str(&l?).map_err(|e| ArchiveError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok((header, out))
}

fn json_line<W: Write>(w: &mut W, v: &impl Serialize) -> Result<(), ArchiveError> {
    serde_json::to_writer(&mut *w, v).map_err(std::io::Error::other)?;
    w.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::{CfEpisode, CfState};
    use crate::model::VehicleKind;

    fn episode(start: f64) -> CfEpisode {
        CfEpisode {
            follower_id: "f".into(),
            leader_id: "l".into(),
            follower_kind: VehicleKind::Av,
            leader_kind: VehicleKind::Hv,
            start_t: start,
            end_t: start + 0.2,
            dt: 0.1,
            states: vec![CfState::new(10.0, -0.5, 4.0); 3],
            bumper_gap: vec![5.5; 3],
        }
    }

    #[test]
    fn round_trip_keeps_records_and_config() {
        let eps = vec![episode(0.0), episode(3.0)];
        let mut buf = Vec::new();
        write_archive(&mut buf, "cf", &serde_json::json!({"max_gap_m": 50.0}), &eps).unwrap();
        let (h, back): (_, Vec<CfEpisode>) = read_archive(buf.as_slice(), "cf").unwrap();
        assert_eq!(h.count, 2);
        assert_eq!(h.config["max_gap_m"], 50.0);
        assert_eq!(back, eps);
    }

    #[test]
    fn rejects_wrong_kind_and_empty_input() {
        let mut buf = Vec::new();
        write_archive::<CfEpisode, _>(&mut buf, "cf", &(), &[]).unwrap();
        assert!(matches!(read_archive::<CfEpisode, _>(buf.as_slice(), "lc"), Err(ArchiveError::Kind { .. })));
        assert!(matches!(read_archive::<CfEpisode, _>(&b""[..], "cf"), Err(ArchiveError::MissingHeader)));
    }

    #[test]
    fn bad_record_reports_its_line() {
        let mut buf = Vec::new();
        write_archive(&mut buf, "cf", &(), &[episode(0.0)]).unwrap();
        buf.extend_from_slice(b"{not json}\n");
        match read_archive::<CfEpisode, _>(buf.as_slice(), "cf") {
            Err(ArchiveError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
