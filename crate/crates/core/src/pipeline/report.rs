use std::path::{Path, PathBuf};

use crate::dataset::ManifestError;
use crate::digest::write_atomic;
use crate::scoring::{apply_error_labels, combined_csv, combined_markdown, delta_report, ErrorLabel, MetricsReport, RunRecord};

use super::run::{parse_records, RunManifest, RECORDS_FILE};
use super::PipelineError;

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_MD: &str = "metrics.md";
pub const METRICS_CSV: &str = "metrics.csv";

/// All records of a run. A missing records file is a manifest error.
pub fn load_run_records(run_dir: &Path) -> Result<Vec<RunRecord>, PipelineError> {
    let path = run_dir.join(RECORDS_FILE);
    let bytes = std::fs::read(&path).map_err(|source| ManifestError::Io {
        path: path.clone(),
        source,
    })?;
    parse_records(&path, &bytes)
}

/// JSONL of `{"instance_id", "category"}` objects.
pub fn load_error_labels(path: &Path) -> Result<Vec<ErrorLabel>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Corrupt {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn run_label(run_dir: &Path) -> String {
    match RunManifest::load(run_dir) {
        Ok(m) => format!("{} ({})", m.config.describe(), m.run_id),
        Err(_) => run_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| run_dir.display().to_string()),
    }
}

/// Metrics for one run, without writing anything.
pub fn compute_report(run_dir: &Path, error_labels: Option<&Path>) -> Result<MetricsReport, PipelineError> {
    let mut records = load_run_records(run_dir)?;
    if let Some(p) = error_labels {
        apply_error_labels(&mut records, &load_error_labels(p)?)?;
    }
    let mut report = MetricsReport::from_records(&records)?;
    report.run_id = Some(
        RunManifest::load(run_dir)
            .map(|m| m.run_id)
            .unwrap_or_else(|_| run_label(run_dir)),
    );
    Ok(report)
}

/// Score a run (optionally against a baseline run) and write
/// `metrics.{json,md,csv}` into the run directory.
pub fn score_run(
    run_dir: &Path,
    baseline: Option<&Path>,
    error_labels: Option<&Path>,
) -> Result<MetricsReport, PipelineError> {
    let mut report = compute_report(run_dir, error_labels)?;
    if let Some(b) = baseline {
        report = delta_report(&compute_report(b, None)?, &report);
    }
    write_report_files(run_dir, &report)?;
    Ok(report)
}

pub fn write_report_files(dir: &Path, report: &MetricsReport) -> Result<(), PipelineError> {
    let json = serde_json::to_vec_pretty(report).expect("serializable");
    for (name, bytes) in [
        (METRICS_JSON, json),
        (METRICS_MD, report.to_markdown().into_bytes()),
        (METRICS_CSV, report.to_csv().into_bytes()),
    ] {
        let path = dir.join(name);
        write_atomic(&path, &bytes).map_err(|e| PipelineError::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// Side-by-side table of several runs. Runs that cannot be scored are
/// skipped with a warning; an error is returned only when none can be.
pub fn report_runs(run_dirs: &[PathBuf], format: ReportFormat) -> Result<String, PipelineError> {
    let mut columns = Vec::new();
    for dir in run_dirs {
        match compute_report(dir, None) {
            Ok(r) => columns.push((run_label(dir), r)),
            Err(e) => log::warn!("skipping {}: {e}", dir.display()),
        }
    }
    if columns.is_empty() {
        return Err(PipelineError::NothingToReport);
    }
    Ok(match format {
        ReportFormat::Markdown => combined_markdown(&columns),
        ReportFormat::Csv => combined_csv(&columns),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_records_is_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            score_run(dir.path(), None, None),
            Err(PipelineError::Manifest(ManifestError::Io { .. }))
        ));
    }

    #[test]
    fn format_parsing() {
        assert_eq!("md".parse::<ReportFormat>(), Ok(ReportFormat::Markdown));
        assert_eq!("CSV".parse::<ReportFormat>(), Ok(ReportFormat::Csv));
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
