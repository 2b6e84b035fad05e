//! End-to-end orchestration: config, runs, ablation grids and reports.

mod ablation;
mod config;
mod report;
mod run;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{ManifestError, SampleError};
use crate::scoring::ScoreError;

pub use ablation::{ablation_markdown, grid_configs, run_ablation, AblationAxes, AblationCell, AblationResult, ABLATION_REPORT};
pub use config::{PromptPins, RunConfig, RunMode, SampleSpec, DEFAULT_MAX_CONCURRENCY, RUN_ID_LEN};
pub use report::{
    compute_report, load_error_labels, load_run_records, report_runs, score_run, write_report_files, ReportFormat,
    METRICS_CSV, METRICS_JSON, METRICS_MD,
};
pub use run::{
    file_stem, load_dataset, read_records_for_resume, run_eval, RunManifest, RunOptions, RunSummary, ANNOTATED_DIR,
    MANIFEST_FILE, RECORDS_FILE,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is corrupt: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("no run could be scored")]
    NothingToReport,
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
