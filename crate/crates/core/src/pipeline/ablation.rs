use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::detector::DetectorKind;
use crate::digest::write_atomic;
use crate::render::VPromptStyle;
use crate::scoring::MetricsReport;
use crate::tprompt::PromptStrategy;

use super::config::{RunConfig, RunMode};
use super::report::compute_report;
use super::run::{run_eval, RunOptions};
use super::PipelineError;

pub const ABLATION_REPORT: &str = "ablation_report.md";

/// Grid axes. An empty axis keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationAxes {
    pub strategies: Vec<PromptStrategy>,
    pub styles: Vec<VPromptStyle>,
    pub detectors: Vec<DetectorKind>,
    /// Add an original-image run alongside the grid.
    pub include_baseline: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub config: RunConfig,
    pub run_dir: Option<PathBuf>,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub cells: Vec<AblationCell>,
    pub markdown: String,
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Every config of the grid, strategies outermost.
pub fn grid_configs(base: &RunConfig, axes: &AblationAxes) -> Vec<RunConfig> {
    let mut out = Vec::new();
    if axes.include_baseline {
        out.push(RunConfig {
            mode: RunMode::Baseline,
            ..base.clone()
        });
    }
    for strategy in axis(&axes.strategies, base.strategy) {
        for style in axis(&axes.styles, base.style) {
            for detector_kind in axis(&axes.detectors, base.detector_kind) {
                out.push(RunConfig {
                    strategy,
                    style,
                    detector_kind,
                    ..base.clone()
                });
            }
        }
    }
    out
}

/// Run every grid cell against the shared caches and build the combined
/// report. A failing cell is recorded and the others still run.
pub fn run_ablation(
    base: &RunConfig,
    axes: &AblationAxes,
    opts: &RunOptions,
) -> Result<AblationResult, PipelineError> {
    let mut cells = Vec::new();
    for config in grid_configs(base, axes) {
        let outcome = run_eval(&config, opts).and_then(|s| {
            let report = compute_report(&s.run_dir, None)?;
            Ok((s.run_dir, report))
        });
        let cell = match outcome {
            Ok((dir, report)) => AblationCell {
                config,
                run_dir: Some(dir),
                report: Some(report),
                error: None,
            },
            Err(e) => {
                log::warn!("ablation cell {} failed: {e}", config.describe());
                AblationCell {
                    config,
                    run_dir: None,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        };
        cells.push(cell);
    }
    let markdown = ablation_markdown(&cells);
    std::fs::create_dir_all(&base.output_dir).map_err(|e| PipelineError::io(&base.output_dir, e))?;
    let path = base.output_dir.join(ABLATION_REPORT);
    write_atomic(&path, markdown.as_bytes()).map_err(|e| PipelineError::io(&path, e))?;
    Ok(AblationResult { cells, markdown })
}

/// Metrics worth a column or row in an ablation table.
fn headline_keys(cells: &[AblationCell]) -> Vec<String> {
    let keys: BTreeSet<String> = cells
        .iter()
        .filter_map(|c| c.report.as_ref())
        .flat_map(|r| r.flatten().into_keys())
        .filter(|k| {
            !(k.ends_with(".acc") || k.ends_with(".acc_plus") || k.starts_with("errors."))
                && !(k.starts_with("pope.") && (k.ends_with(".precision") || k.ends_with(".recall")))
        })
        .collect();
    keys.into_iter().collect()
}

fn cell_value(cell: &AblationCell, key: &str) -> String {
    match (&cell.report, &cell.error) {
        (Some(r), _) => r.cell(key).unwrap_or_else(|| "-".into()),
        (None, _) => "failed".into(),
    }
}

fn detector_label(kind: DetectorKind) -> &'static str {
    match kind {
        DetectorKind::SegmentEverything => "+ SAM",
        DetectorKind::ConditionalSegment => "+ CSAM",
        DetectorKind::GroundingBox => "+ VP",
    }
}

fn column_label(cell: &AblationCell, vary: (bool, bool, bool)) -> String {
    let c = &cell.config;
    if c.mode == RunMode::Baseline {
        return "Original image".into();
    }
    let mut parts = Vec::new();
    if vary.0 {
        parts.push(c.strategy.label().to_string());
    }
    if vary.1 {
        parts.push(c.style.to_string());
    }
    if vary.2 {
        parts.push(detector_label(c.detector_kind).to_string());
    }
    if parts.is_empty() {
        c.describe()
    } else {
        parts.join(" ")
    }
}

fn check(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        ""
    }
}

/// Style-only grids get one row per marker type with its layer flags;
/// anything else gets metrics as rows and grid cells as columns.
pub fn ablation_markdown(cells: &[AblationCell]) -> String {
    let grid: Vec<&AblationCell> = cells.iter().filter(|c| c.config.mode == RunMode::Vtprompt).collect();
    let distinct = |f: &dyn Fn(&RunConfig) -> String| {
        grid.iter().map(|c| f(&c.config)).collect::<BTreeSet<_>>().len() > 1
    };
    let vary = (
        distinct(&|c| c.strategy.as_str().to_string()),
        distinct(&|c| c.style.to_string()),
        distinct(&|c| c.detector_kind.as_str().to_string()),
    );
    let keys = headline_keys(cells);
    let mut s = String::new();

    if vary == (false, true, false) {
        s.push_str("| Type | Number | Box | Mask |");
        for k in &keys {
            let _ = write!(s, " {k} |");
        }
        s.push_str("\n|---|---|---|---|");
        s.push_str(&"---|".repeat(keys.len()));
        s.push('\n');
        for c in cells {
            let st = c.config.style;
            let name = if c.config.mode == RunMode::Baseline {
                "Original image".to_string()
            } else {
                st.preset_name()
                    .map(|n| n.replace("type_", "Type "))
                    .unwrap_or_else(|| st.to_string())
            };
            let flags = if c.config.mode == RunMode::Baseline {
                ["", "", ""]
            } else {
                [check(st.number), check(st.boxes), check(st.mask)]
            };
            let _ = write!(s, "| {name} | {} | {} | {} |", flags[0], flags[1], flags[2]);
            for k in &keys {
                let _ = write!(s, " {} |", cell_value(c, k));
            }
            s.push('\n');
        }
    } else {
        s.push_str("| Metric |");
        for c in cells {
            let _ = write!(s, " {} |", column_label(c, vary));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(cells.len()));
        s.push('\n');
        for k in &keys {
            let _ = write!(s, "| {k} |");
            for c in cells {
                let _ = write!(s, " {} |", cell_value(c, k));
            }
            s.push('\n');
        }
    }

    let failed: Vec<&AblationCell> = cells.iter().filter(|c| c.error.is_some()).collect();
    if !failed.is_empty() {
        s.push_str("\nFailed cells:\n\n");
        for c in failed {
            let _ = writeln!(s, "- {}: {}", c.config.describe(), c.error.as_deref().unwrap_or(""));
        }
    }
    s
}
