//! MME, MMBench and POPE metrics over run records.
//!
//! All arithmetic is full precision; rounding happens only when formatting.
//! Correctness is always recomputed from the parsed answer and the answer key,
//! never trusted from the stored flag.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PopeSetting, TaskKind};
use crate::tprompt::{is_correct, AnswerValue, ParsedAnswer};

/// Points available per MME subtask (Acc + Acc+).
pub const MME_SUBTASK_MAX_POINTS: f64 = 200.0;

pub const MME_DECIMALS: usize = 2;
pub const MMB_DECIMALS: usize = 2;
pub const POPE_DECIMALS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    InadequateVisualGrounding,
    FaultyAttributeSpatialExtraction,
    FaultyLogicalReasoning,
    Other,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 4] = [
        ErrorCategory::InadequateVisualGrounding,
        ErrorCategory::FaultyAttributeSpatialExtraction,
        ErrorCategory::FaultyLogicalReasoning,
        ErrorCategory::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ErrorCategory::InadequateVisualGrounding => "Inadequate visual grounding",
            ErrorCategory::FaultyAttributeSpatialExtraction => {
                "Faulty extraction of attributes and spatial information"
            }
            ErrorCategory::FaultyLogicalReasoning => "Faulty logical reasoning",
            ErrorCategory::Other => "Other",
        }
    }
}

/// Outcome of answer parsing for a record that reached the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseOutcome {
    Parsed(ParsedAnswer),
    Unparsable { raw: String },
}

/// Content hashes of every stage artifact that fed the answer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageArtifacts {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub concepts: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detections: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub annotated_image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub answer_prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub stage: String,
    pub message: String,
}

/// Per-instance outcome of a run. One JSONL line in `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub instance_id: String,
    pub task: TaskKind,
    pub image_group_id: String,
    pub ground_truth: String,
    /// `None` when a stage failed before an answer was produced.
    pub parsed: Option<ParseOutcome>,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<RecordFailure>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error_category: Option<ErrorCategory>,
    pub stage_artifacts: StageArtifacts,
}

impl RunRecord {
    pub fn answer(&self) -> Option<&ParsedAnswer> {
        match &self.parsed {
            Some(ParseOutcome::Parsed(p)) => Some(p),
            _ => None,
        }
    }

    /// Correctness from the parsed answer; unparsable and failed records are wrong.
    pub fn recompute_correct(&self) -> bool {
        self.answer().is_some_and(|p| is_correct(p, &self.ground_truth))
    }

    /// Predicted "yes". Anything other than a parsed yes counts as "no".
    pub fn predicted_yes(&self) -> bool {
        matches!(self.answer().map(|p| &p.value), Some(AnswerValue::YesNo(true)))
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn is_unparsable(&self) -> bool {
        matches!(self.parsed, Some(ParseOutcome::Unparsable { .. }))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("no records to score")]
    EmptyRecordSet,
    #[error("image group `{0}` does not have exactly two records")]
    MalformedGroup(String),
    #[error("record `{0}` is not a yes/no task")]
    NotYesNo(String),
    #[error("error label for `{0}` targets a correct record")]
    LabelOnCorrectRecord(String),
    #[error("error label for unknown record `{0}`")]
    UnknownRecord(String),
}

fn pct(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

fn require_yes_no(records: &[RunRecord]) -> Result<(), ScoreError> {
    match records.iter().find(|r| !r.task.is_yes_no()) {
        Some(r) => Err(ScoreError::NotYesNo(r.instance_id.clone())),
        None => Ok(()),
    }
}

/// 100 × correct / total for one MME subtask.
pub fn mme_acc(records: &[RunRecord]) -> Result<f64, ScoreError> {
    if records.is_empty() {
        return Err(ScoreError::EmptyRecordSet);
    }
    require_yes_no(records)?;
    let correct = records.iter().filter(|r| r.recompute_correct()).count();
    Ok(pct(correct, records.len()))
}

/// 100 × images with both questions right / images.
pub fn mme_acc_plus(records: &[RunRecord]) -> Result<f64, ScoreError> {
    if records.is_empty() {
        return Err(ScoreError::EmptyRecordSet);
    }
    require_yes_no(records)?;
    let mut groups: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for r in records {
        groups
            .entry(&r.image_group_id)
            .or_default()
            .push(r.recompute_correct());
    }
    if let Some((gid, _)) = groups.iter().find(|(_, v)| v.len() != 2) {
        return Err(ScoreError::MalformedGroup(gid.to_string()));
    }
    let full = groups.values().filter(|v| v.iter().all(|&c| c)).count();
    Ok(pct(full, groups.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubtaskScore {
    pub acc: f64,
    pub acc_plus: f64,
    pub points: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MmeScore {
    pub subtasks: BTreeMap<String, SubtaskScore>,
    pub total: f64,
}

/// Acc + Acc+ per subtask and their sum over `subtasks`.
pub fn mme_score(
    by_subtask: &BTreeMap<String, Vec<RunRecord>>,
    subtasks: &[&str],
) -> Result<MmeScore, ScoreError> {
    let mut out = MmeScore::default();
    for &name in subtasks {
        let records = by_subtask.get(name).map(Vec::as_slice).unwrap_or(&[]);
        let acc = mme_acc(records)?;
        let acc_plus = mme_acc_plus(records)?;
        let points = acc + acc_plus;
        out.total += points;
        out.subtasks.insert(
            name.to_string(),
            SubtaskScore {
                acc,
                acc_plus,
                points,
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MmbScore {
    pub overall: f64,
    pub abilities: BTreeMap<String, f64>,
}

/// Overall and per-ability accuracy.
pub fn mmb_accuracy(records: &[RunRecord]) -> Result<MmbScore, ScoreError> {
    if records.is_empty() {
        return Err(ScoreError::EmptyRecordSet);
    }
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for r in records {
        let c = r.recompute_correct();
        correct += c as usize;
        let e = per.entry(r.task.name().to_string()).or_default();
        e.0 += c as usize;
        e.1 += 1;
    }
    Ok(MmbScore {
        overall: pct(correct, records.len()),
        abilities: per.into_iter().map(|(k, (c, n))| (k, pct(c, n))).collect(),
    })
}

/// Confusion counts with "yes" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_records(records: &[RunRecord]) -> Self {
        let mut c = Self::default();
        for r in records {
            let label = r.ground_truth.eq_ignore_ascii_case("yes");
            match (r.predicted_yes(), label) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// A percentage that may be undefined (zero denominator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metric {
    Value(f64),
    Undefined { undefined: String },
}

impl Metric {
    pub fn undefined(reason: &str) -> Self {
        Metric::Undefined {
            undefined: reason.to_string(),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Undefined { .. } => None,
        }
    }

    pub fn display(&self, decimals: usize) -> String {
        match self {
            Metric::Value(v) => format!("{v:.decimals$}"),
            Metric::Undefined { undefined } => format!("n/a ({undefined})"),
        }
    }
}

/// Harmonic mean of precision and recall (same scale in, same scale out).
pub fn f1_from(precision: f64, recall: f64) -> Metric {
    if precision + recall == 0.0 {
        Metric::undefined("precision and recall are both zero")
    } else {
        Metric::Value(2.0 * precision * recall / (precision + recall))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub accuracy: f64,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub counts: ConfusionCounts,
}

pub fn pope_metrics_from_counts(c: ConfusionCounts) -> Result<PopeMetrics, ScoreError> {
    let n = c.total();
    if n == 0 {
        return Err(ScoreError::EmptyRecordSet);
    }
    let accuracy = 100.0 * (c.tp + c.tn) as f64 / n as f64;
    let precision = if c.tp + c.fp == 0 {
        Metric::undefined("no positive predictions")
    } else {
        Metric::Value(100.0 * c.tp as f64 / (c.tp + c.fp) as f64)
    };
    let recall = if c.tp + c.fn_ == 0 {
        Metric::undefined("no positive labels")
    } else {
        Metric::Value(100.0 * c.tp as f64 / (c.tp + c.fn_) as f64)
    };
    let f1 = match (precision.value(), recall.value()) {
        (Some(p), Some(r)) => f1_from(p, r),
        _ => Metric::undefined("precision or recall undefined"),
    };
    Ok(PopeMetrics {
        accuracy,
        precision,
        recall,
        f1,
        counts: c,
    })
}

pub fn pope_metrics(records: &[RunRecord]) -> Result<PopeMetrics, ScoreError> {
    require_yes_no(records)?;
    pope_metrics_from_counts(ConfusionCounts::from_records(records))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorDistribution {
    pub labeled: u64,
    pub counts: BTreeMap<ErrorCategory, u64>,
    pub percentages: BTreeMap<ErrorCategory, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

/// Share of each category among labeled incorrect records.
pub fn error_distribution(records: &[RunRecord]) -> ErrorDistribution {
    let mut counts: BTreeMap<ErrorCategory, u64> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.recompute_correct()) {
        if let Some(c) = r.error_category {
            *counts.entry(c).or_default() += 1;
        }
    }
    let labeled: u64 = counts.values().sum();
    if labeled == 0 {
        return ErrorDistribution {
            note: Some("no labeled incorrect records".into()),
            ..Default::default()
        };
    }
    let percentages = counts
        .iter()
        .map(|(&k, &n)| (k, 100.0 * n as f64 / labeled as f64))
        .collect();
    ErrorDistribution {
        labeled,
        counts,
        percentages,
        note: None,
    }
}

/// Human label for one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorLabel {
    pub instance_id: String,
    pub category: ErrorCategory,
}

/// Attach human error labels. Labels may only target incorrect records.
pub fn apply_error_labels(records: &mut [RunRecord], labels: &[ErrorLabel]) -> Result<(), ScoreError> {
    let index: BTreeMap<String, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.instance_id.clone(), i))
        .collect();
    for l in labels {
        let &i = index
            .get(&l.instance_id)
            .ok_or_else(|| ScoreError::UnknownRecord(l.instance_id.clone()))?;
        if records[i].recompute_correct() {
            return Err(ScoreError::LabelOnCorrectRecord(l.instance_id.clone()));
        }
        records[i].error_category = Some(l.category);
    }
    Ok(())
}

/// Scores for every benchmark present in a record set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub run_id: Option<String>,
    pub records: usize,
    pub failed: usize,
    pub unparsable: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mme: Option<MmeScore>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mmb: Option<MmbScore>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub pope: BTreeMap<PopeSetting, PopeMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub errors: Option<ErrorDistribution>,
    /// `treatment − baseline` per flattened key, full precision.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub deltas: BTreeMap<String, f64>,
}

/// One displayable number with its rounding precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatValue {
    pub value: f64,
    pub decimals: usize,
}

impl MetricsReport {
    /// Score every benchmark found in `records`.
    pub fn from_records(records: &[RunRecord]) -> Result<Self, ScoreError> {
        let mut report = MetricsReport {
            records: records.len(),
            failed: records.iter().filter(|r| r.is_failed()).count(),
            unparsable: records.iter().filter(|r| r.is_unparsable()).count(),
            ..Default::default()
        };

        let mut mme: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
        let mut mmb = Vec::new();
        let mut pope: BTreeMap<PopeSetting, Vec<RunRecord>> = BTreeMap::new();
        for r in records {
            match &r.task {
                TaskKind::Mme { name } => mme.entry(name.clone()).or_default().push(r.clone()),
                TaskKind::Mmb { .. } => mmb.push(r.clone()),
                TaskKind::Pope { setting } => pope.entry(*setting).or_default().push(r.clone()),
            }
        }
        if !mme.is_empty() {
            let names: Vec<&str> = mme.keys().map(String::as_str).collect();
            report.mme = Some(mme_score(&mme, &names)?);
        }
        if !mmb.is_empty() {
            report.mmb = Some(mmb_accuracy(&mmb)?);
        }
        for (setting, rs) in pope {
            report.pope.insert(setting, pope_metrics(&rs)?);
        }
        if records.iter().any(|r| r.error_category.is_some()) {
            report.errors = Some(error_distribution(records));
        }
        Ok(report)
    }

    /// Every reported number keyed as `bench.slice.metric`.
    pub fn flatten(&self) -> BTreeMap<String, FlatValue> {
        let mut out = BTreeMap::new();
        let mut put = |k: String, value: f64, decimals: usize| {
            out.insert(k, FlatValue { value, decimals });
        };
        if let Some(m) = &self.mme {
            put("mme.total".into(), m.total, MME_DECIMALS);
            for (name, s) in &m.subtasks {
                put(format!("mme.{name}.acc"), s.acc, MME_DECIMALS);
                put(format!("mme.{name}.acc_plus"), s.acc_plus, MME_DECIMALS);
                put(format!("mme.{name}.points"), s.points, MME_DECIMALS);
            }
        }
        if let Some(m) = &self.mmb {
            put("mmb.overall".into(), m.overall, MMB_DECIMALS);
            for (name, v) in &m.abilities {
                put(format!("mmb.{name}"), *v, MMB_DECIMALS);
            }
        }
        for (setting, p) in &self.pope {
            put(format!("pope.{setting}.accuracy"), p.accuracy, POPE_DECIMALS);
            for (k, m) in [("precision", &p.precision), ("recall", &p.recall), ("f1", &p.f1)] {
                if let Some(v) = m.value() {
                    put(format!("pope.{setting}.{k}"), v, POPE_DECIMALS);
                }
            }
        }
        if let Some(e) = &self.errors {
            for (c, v) in &e.percentages {
                let key = serde_json::to_value(c).expect("enum serializes");
                put(format!("errors.{}", key.as_str().unwrap_or("other")), *v, 0);
            }
        }
        out
    }

    /// `value(+delta)` when a delta exists, else just the value.
    pub fn cell(&self, key: &str) -> Option<String> {
        let flat = self.flatten();
        let v = flat.get(key)?;
        Some(format_with_delta(v.value, self.deltas.get(key).copied(), v.decimals))
    }

    pub fn to_markdown(&self) -> String {
        let flat = self.flatten();
        let cell = |k: &str| {
            flat.get(k)
                .map(|v| format_with_delta(v.value, self.deltas.get(k).copied(), v.decimals))
                .unwrap_or_else(|| "-".into())
        };
        let mut s = String::new();
        if let Some(id) = &self.run_id {
            let _ = writeln!(s, "# Run `{id}`\n");
        }
        let _ = writeln!(
            s,
            "{} records, {} failed, {} unparsable (failed and unparsable answers count as incorrect and as \"no\" predictions).\n",
            self.records, self.failed, self.unparsable
        );
        if let Some(m) = &self.mme {
            s.push_str("## MME\n\n| Subtask | Acc | Acc+ | Score |\n|---|---|---|---|\n");
            for name in m.subtasks.keys() {
                let _ = writeln!(
                    s,
                    "| {name} | {} | {} | {} |",
                    cell(&format!("mme.{name}.acc")),
                    cell(&format!("mme.{name}.acc_plus")),
                    cell(&format!("mme.{name}.points"))
                );
            }
            let _ = writeln!(s, "| **Total** | | | {} |\n", cell("mme.total"));
        }
        if let Some(m) = &self.mmb {
            s.push_str("## MMB\n\n| Ability | Accuracy (%) |\n|---|---|\n");
            for name in m.abilities.keys() {
                let _ = writeln!(s, "| {name} | {} |", cell(&format!("mmb.{name}")));
            }
            let _ = writeln!(s, "| **Overall** | {} |\n", cell("mmb.overall"));
        }
        if !self.pope.is_empty() {
            s.push_str("## POPE\n\n| Setting | Accuracy | Precision | Recall | F1 Score |\n|---|---|---|---|---|\n");
            for (setting, p) in &self.pope {
                let m = |k: &str, metric: &Metric| match metric {
                    Metric::Value(_) => cell(&format!("pope.{setting}.{k}")),
                    undefined => undefined.display(POPE_DECIMALS),
                };
                let _ = writeln!(
                    s,
                    "| {setting} | {} | {} | {} | {} |",
                    cell(&format!("pope.{setting}.accuracy")),
                    m("precision", &p.precision),
                    m("recall", &p.recall),
                    m("f1", &p.f1)
                );
            }
            s.push('\n');
        }
        if let Some(e) = &self.errors {
            s.push_str("## Error categories\n\n| Category | Share (%) |\n|---|---|\n");
            for c in ErrorCategory::ALL {
                if let Some(v) = e.percentages.get(&c) {
                    let _ = writeln!(s, "| {} | {v:.0} |", c.label());
                }
            }
            if let Some(note) = &e.note {
                let _ = writeln!(s, "\n_{note}_");
            }
            s.push('\n');
        }
        s
    }

    /// `metric,value,delta` rows, values rounded for display.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,delta\n");
        for (k, v) in self.flatten() {
            let d = self
                .deltas
                .get(&k)
                .map(|d| format_delta(*d, v.decimals))
                .unwrap_or_default();
            let _ = writeln!(s, "{k},{:.*},{d}", v.decimals, v.value);
        }
        s
    }
}

/// Signed delta rounded for display; never prints `-0.00`.
pub fn format_delta(delta: f64, decimals: usize) -> String {
    let scale = 10f64.powi(decimals as i32);
    let rounded = (delta * scale).round() / scale;
    format!("{:+.*}", decimals, rounded + 0.0)
}

pub fn format_with_delta(value: f64, delta: Option<f64>, decimals: usize) -> String {
    match delta {
        Some(d) => format!("{value:.decimals$}({})", format_delta(d, decimals)),
        None => format!("{value:.decimals$}"),
    }
}

/// Treatment report annotated with per-key deltas against the baseline.
pub fn delta_report(baseline: &MetricsReport, treatment: &MetricsReport) -> MetricsReport {
    let base = baseline.flatten();
    let mut out = treatment.clone();
    out.deltas = treatment
        .flatten()
        .into_iter()
        .filter_map(|(k, v)| base.get(&k).map(|b| (k, v.value - b.value)))
        .collect();
    out
}

/// Side-by-side Markdown table of several reports (rows are metrics).
pub fn combined_markdown(columns: &[(String, MetricsReport)]) -> String {
    let flats: Vec<BTreeMap<String, FlatValue>> = columns.iter().map(|(_, r)| r.flatten()).collect();
    let keys: BTreeSet<&String> = flats.iter().flat_map(|f| f.keys()).collect();
    let mut s = String::from("| Metric |");
    for (label, _) in columns {
        let _ = write!(s, " {label} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(columns.len()));
    s.push('\n');
    for k in keys {
        let _ = write!(s, "| {k} |");
        for ((_, r), f) in columns.iter().zip(&flats) {
            let c = f
                .get(k)
                .map(|v| format_with_delta(v.value, r.deltas.get(k).copied(), v.decimals))
                .unwrap_or_else(|| "-".into());
            let _ = write!(s, " {c} |");
        }
        s.push('\n');
    }
    s
}

/// Same layout as [`combined_markdown`] in CSV.
pub fn combined_csv(columns: &[(String, MetricsReport)]) -> String {
    let flats: Vec<BTreeMap<String, FlatValue>> = columns.iter().map(|(_, r)| r.flatten()).collect();
    let keys: BTreeSet<&String> = flats.iter().flat_map(|f| f.keys()).collect();
    let mut s = String::from("metric");
    for (label, _) in columns {
        let _ = write!(s, ",{}", csv_field(label));
    }
    s.push('\n');
    for k in keys {
        s.push_str(k);
        for f in &flats {
            match f.get(k) {
                Some(v) => {
                    let _ = write!(s, ",{:.*}", v.decimals, v.value);
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tprompt::ParsePath;

    fn rec(id: &str, group: &str, task: TaskKind, gt: &str, answer: Option<AnswerValue>) -> RunRecord {
        RunRecord {
            instance_id: id.into(),
            task,
            image_group_id: group.into(),
            ground_truth: gt.into(),
            parsed: answer.map(|v| {
                ParseOutcome::Parsed(ParsedAnswer {
                    value: v,
                    raw: String::new(),
                    parse_path: ParsePath::Exact,
                })
            }),
            correct: false,
            failure: None,
            error_category: None,
            stage_artifacts: StageArtifacts::default(),
        }
    }

    fn mme_rec(id: usize, group: usize, correct: bool) -> RunRecord {
        rec(
            &format!("q{id}"),
            &format!("g{group}"),
            TaskKind::Mme { name: "count".into() },
            "yes",
            Some(AnswerValue::YesNo(correct)),
        )
    }

    /// 10 images: 6 with both right, 3 with one right, 1 with none.
    fn fixture_subtask() -> Vec<RunRecord> {
        let pattern = [
            (true, true),
            (true, true),
            (true, true),
            (true, true),
            (true, true),
            (true, true),
            (true, false),
            (false, true),
            (true, false),
            (false, false),
        ];
        pattern
            .iter()
            .enumerate()
            .flat_map(|(g, &(a, b))| [mme_rec(2 * g, g, a), mme_rec(2 * g + 1, g, b)])
            .collect()
    }

    #[test]
    fn acc_hand_counts() {
        let zero: Vec<_> = (0..60).map(|i| mme_rec(i, i / 2, false)).collect();
        assert_eq!(mme_acc(&zero).unwrap(), 0.0);
        let all: Vec<_> = (0..60).map(|i| mme_rec(i, i / 2, true)).collect();
        assert_eq!(mme_acc(&all).unwrap(), 100.0);
        let mut seventeen: Vec<_> = (0..20).map(|i| mme_rec(i, i / 2, i >= 3)).collect();
        assert_eq!(mme_acc(&seventeen).unwrap(), 85.0);
        seventeen.reverse();
        assert_eq!(mme_acc(&seventeen).unwrap(), 85.0);
        assert_eq!(mme_acc(&[]), Err(ScoreError::EmptyRecordSet));
    }

    #[test]
    fn acc_plus_hand_counts() {
        let recs = fixture_subtask();
        // 15 of 20 questions right; 6 of 10 images fully right.
        assert_eq!(mme_acc(&recs).unwrap(), 75.0);
        assert_eq!(mme_acc_plus(&recs).unwrap(), 60.0);

        let half: Vec<_> = (0..20).map(|i| mme_rec(i, i / 2, i % 2 == 0)).collect();
        assert_eq!(mme_acc_plus(&half).unwrap(), 0.0);
        assert_eq!(mme_acc(&half).unwrap(), 50.0);

        let lone = vec![mme_rec(0, 0, true), mme_rec(1, 0, true), mme_rec(2, 1, true)];
        assert_eq!(mme_acc_plus(&lone), Err(ScoreError::MalformedGroup("g1".into())));
    }

    #[test]
    fn points_and_total() {
        let mut by = BTreeMap::new();
        by.insert("count".to_string(), fixture_subtask());
        let s = mme_score(&by, &["count"]).unwrap();
        assert_eq!(s.subtasks["count"].points, 135.0);
        assert_eq!(s.total, 135.0);
        assert_eq!(mme_score(&by, &["count", "color"]), Err(ScoreError::EmptyRecordSet));
    }

    #[test]
    fn mmb_rounding_path() {
        let task = TaskKind::Mmb {
            name: "object_localization".into(),
        };
        let recs: Vec<_> = (0..315)
            .map(|i| {
                let ans = if i < 211 { "A" } else { "B" };
                rec(&i.to_string(), &i.to_string(), task.clone(), "A", Some(AnswerValue::Option(ans.into())))
            })
            .collect();
        let m = mmb_accuracy(&recs).unwrap();
        assert_eq!(format!("{:.2}", m.overall), "66.98");
        assert_eq!(format!("{:.2}", m.abilities["object_localization"]), "66.98");
        let none: Vec<_> = recs.iter().map(|r| RunRecord { parsed: None, ..r.clone() }).collect();
        assert_eq!(mmb_accuracy(&none).unwrap().overall, 0.0);
    }

    #[test]
    fn pope_undefined_precision() {
        let t = TaskKind::Pope {
            setting: PopeSetting::Random,
        };
        let recs = vec![
            rec("a", "a", t.clone(), "yes", Some(AnswerValue::YesNo(false))),
            rec("b", "b", t.clone(), "no", None),
        ];
        let m = pope_metrics(&recs).unwrap();
        assert_eq!(m.precision, Metric::undefined("no positive predictions"));
        assert_eq!(m.recall, Metric::Value(0.0));
        assert!(m.f1.value().is_none());
        assert_eq!(m.accuracy, 50.0);
        assert_eq!(m.counts, ConfusionCounts { tp: 0, fp: 0, tn: 1, fn_: 1 });
    }

    #[test]
    fn printed_f1_examples() {
        assert_eq!(format!("{:.1}", f1_from(96.9, 54.4).value().unwrap()), "69.7");
        assert_eq!(format!("{:.1}", f1_from(93.5, 81.1).value().unwrap()), "86.9");
    }

    fn report_with_totals(mme_total: f64, mmb: f64) -> MetricsReport {
        MetricsReport {
            mme: Some(MmeScore {
                subtasks: BTreeMap::new(),
                total: mme_total,
            }),
            mmb: Some(MmbScore {
                overall: mmb,
                abilities: BTreeMap::new(),
            }),
            ..Default::default()
        }
    }

    #[test]
    fn deltas_format_like_published_tables() {
        let d = delta_report(&report_with_totals(1926.50, 65.00), &report_with_totals(2110.00, 80.69));
        assert_eq!(d.cell("mme.total").unwrap(), "2110.00(+183.50)");
        assert_eq!(d.cell("mmb.overall").unwrap(), "80.69(+15.69)");
        let same = delta_report(&d, &d);
        assert!(same.deltas.values().all(|&v| v == 0.0));
        assert_eq!(same.cell("mme.total").unwrap(), "2110.00(+0.00)");
        assert_eq!(format_delta(-0.001, 2), "+0.00");
        assert_eq!(format_delta(-1.5, 1), "-1.5");
    }

    #[test]
    fn error_distribution_shares() {
        let t = TaskKind::Mmb {
            name: "object_localization".into(),
        };
        let mut recs: Vec<RunRecord> = Vec::new();
        for (cat, n) in [
            (ErrorCategory::InadequateVisualGrounding, 43),
            (ErrorCategory::FaultyAttributeSpatialExtraction, 35),
            (ErrorCategory::FaultyLogicalReasoning, 18),
            (ErrorCategory::Other, 4),
        ] {
            for _ in 0..n {
                let mut r = rec(&recs.len().to_string(), "g", t.clone(), "A", Some(AnswerValue::Option("B".into())));
                r.error_category = Some(cat);
                recs.push(r);
            }
        }
        let d = error_distribution(&recs);
        assert_eq!(d.labeled, 100);
        assert_eq!(d.percentages[&ErrorCategory::InadequateVisualGrounding], 43.0);
        assert_eq!(d.percentages[&ErrorCategory::FaultyAttributeSpatialExtraction], 35.0);
        assert_eq!(d.percentages[&ErrorCategory::FaultyLogicalReasoning], 18.0);
        assert_eq!(d.percentages[&ErrorCategory::Other], 4.0);

        let single = error_distribution(&recs[..3]);
        assert_eq!(single.percentages.values().copied().collect::<Vec<_>>(), [100.0]);

        let empty = error_distribution(&[]);
        assert!(empty.percentages.is_empty());
        assert!(empty.note.is_some());
    }

    #[test]
    fn labels_only_on_incorrect_records() {
        let t = TaskKind::Mme { name: "count".into() };
        let mut recs = vec![
            rec("right", "g", t.clone(), "yes", Some(AnswerValue::YesNo(true))),
            rec("wrong", "g", t, "yes", Some(AnswerValue::YesNo(false))),
        ];
        let label = |id: &str| ErrorLabel {
            instance_id: id.into(),
            category: ErrorCategory::Other,
        };
        assert_eq!(
            apply_error_labels(&mut recs, &[label("right")]),
            Err(ScoreError::LabelOnCorrectRecord("right".into()))
        );
        apply_error_labels(&mut recs, &[label("wrong")]).unwrap();
        assert_eq!(recs[1].error_category, Some(ErrorCategory::Other));
    }

    #[test]
    fn record_json_roundtrip() {
        let r = fixture_subtask().remove(0);
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<RunRecord>(&line).unwrap(), r);
    }

    #[test]
    fn markdown_and_csv_render() {
        let d = delta_report(&report_with_totals(1926.50, 65.00), &report_with_totals(2110.00, 80.69));
        let md = d.to_markdown();
        assert!(md.contains("2110.00(+183.50)"));
        assert!(md.contains("80.69(+15.69)"));
        let csv = d.to_csv();
        assert!(csv.contains("mme.total,2110.00,+183.50"));
        let combined = combined_markdown(&[("base".into(), report_with_totals(1.0, 2.0)), ("vt".into(), d)]);
        assert!(combined.contains("| mmb.overall | 2.00 | 80.69(+15.69) |"));
    }
}
