//! Raw-sample CSV and per-level summary statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Distribution, Median, OrderStatistics};
use thiserror::Error;

use crate::cases::PhaseTimings;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no samples to report")]
    NoSamples,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub p1: f64,
    pub p25: f64,
    pub p75: f64,
    pub p99: f64,
}

impl PhaseStats {
    pub const FIELDS: [&'static str; 6] = ["median", "mean", "p1", "p25", "p75", "p99"];

    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut data = Data::new(values.to_vec());
        Some(Self {
            count: values.len(),
            median: data.median(),
            mean: data.mean().expect("non-empty"),
            p1: data.percentile(1),
            p25: data.percentile(25),
            p75: data.percentile(75),
            p99: data.percentile(99),
        })
    }
}

/// level ("L1") -> side ("INITIATOR") -> phase ("t_e2e") -> statistics.
pub type LevelSummary = BTreeMap<String, BTreeMap<String, BTreeMap<String, PhaseStats>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub samples: usize,
    pub levels: LevelSummary,
}

pub fn summarize(samples: &[PhaseTimings]) -> Result<Summary, ReportError> {
    if samples.is_empty() {
        return Err(ReportError::NoSamples);
    }
    let mut groups: BTreeMap<(String, &'static str), Vec<&PhaseTimings>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.level.to_string(), s.side.as_str())).or_default().push(s);
    }
    let mut levels = LevelSummary::new();
    for ((level, side), group) in groups {
        let phases = PhaseTimings::PHASES
            .iter()
            .map(|&phase| {
                let values: Vec<f64> = group.iter().filter_map(|s| s.phase(phase)).collect();
                (phase.to_owned(), PhaseStats::of(&values).expect("group is non-empty"))
            })
            .collect();
        levels.entry(level).or_default().insert(side.to_owned(), phases);
    }
    Ok(Summary {
        samples: samples.len(),
        levels,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
}

/// Writes `samples.csv` (one row per sample) and `summary.json` into `dir`.
pub fn emit_report(samples: &[PhaseTimings], dir: impl AsRef<Path>) -> Result<ReportFiles, ReportError> {
    let summary = summarize(samples)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let files = ReportFiles {
        csv: dir.join("samples.csv"),
        summary: dir.join("summary.json"),
    };
    let mut writer = csv::Writer::from_path(&files.csv)?;
    for s in samples {
        writer.serialize(s)?;
    }
    writer.flush()?;
    fs::write(&files.summary, serde_json::to_string_pretty(&summary)?)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::Side;
    use qsafe_core::ids::SessionId;
    use qsafe_core::level::SecurityLevel;

    fn sample(level: SecurityLevel, side: Side, e2e: f64) -> PhaseTimings {
        PhaseTimings {
            case_id: "T".into(),
            iteration: 0,
            session_id: SessionId::from("s"),
            level,
            side,
            t_assignment: e2e / 4.0,
            t_configuration: e2e / 4.0,
            t_derivation: e2e / 4.0,
            t_delivery: e2e / 8.0,
            t_e2e: e2e,
        }
    }

    #[test]
    fn hundred_samples_have_all_statistics() {
        let samples: Vec<_> = (1..=100)
            .map(|i| sample(SecurityLevel::L1, Side::Initiator, i as f64))
            .collect();
        let summary = summarize(&samples).unwrap();
        let e2e = summary.levels["L1"]["INITIATOR"]["t_e2e"];
        assert_eq!(e2e.count, 100);
        assert!((e2e.mean - 50.5).abs() < 1e-9);
        assert!((e2e.median - 50.5).abs() < 1e-9);
        assert!(e2e.p1 <= e2e.p25 && e2e.p25 <= e2e.median && e2e.median <= e2e.p75 && e2e.p75 <= e2e.p99);
        assert!(e2e.p1 >= 1.0 && e2e.p99 <= 100.0);
        let json = serde_json::to_value(&summary).unwrap();
        let stats = &json["levels"]["L1"]["INITIATOR"]["t_derivation"];
        for field in PhaseStats::FIELDS {
            assert!(stats[field].is_number(), "{field}");
        }
    }

    #[test]
    fn single_sample_is_degenerate() {
        let summary = summarize(&[sample(SecurityLevel::L3, Side::Target, 7.0)]).unwrap();
        let s = summary.levels["L3"]["TARGET"]["t_e2e"];
        for v in [s.median, s.mean, s.p1, s.p25, s.p75, s.p99] {
            assert_eq!(v, 7.0);
        }
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(summarize(&[]), Err(ReportError::NoSamples)));
        let dir = std::env::temp_dir().join("qsafe-report-empty");
        assert!(matches!(emit_report(&[], &dir), Err(ReportError::NoSamples)));
    }

    #[test]
    fn files_are_written() {
        let dir = std::env::temp_dir().join(format!("qsafe-report-{}", std::process::id()));
        let samples = [
            sample(SecurityLevel::L1, Side::Initiator, 3.0),
            sample(SecurityLevel::L1, Side::Target, 1.0),
            sample(SecurityLevel::L4, Side::Initiator, 9.0),
        ];
        let files = emit_report(&samples, &dir).unwrap();
        let csv = fs::read_to_string(&files.csv).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "case_id,iteration,session_id,level,side,t_assignment,t_configuration,t_derivation,t_delivery,t_e2e"
        );
        assert_eq!(lines.count(), 3);
        let summary: Summary = serde_json::from_str(&fs::read_to_string(&files.summary).unwrap()).unwrap();
        assert_eq!(summary.samples, 3);
        assert_eq!(summary.levels.len(), 2);
        fs::remove_dir_all(&dir).unwrap();
    }
}
