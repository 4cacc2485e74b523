//! Metrics persistence and the summary report.
//!
//! The metrics CSV has a fixed schema
//! (`run_id,seed,dataset,condition,model_role,model_size,epoch,loss,accuracy,wall_seconds`);
//! the header is verified on read so schema drift fails loudly. Fields
//! never contain commas, so no quoting is needed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

pub const METRICS_HEADER: &str =
    "run_id,seed,dataset,condition,model_role,model_size,epoch,loss,accuracy,wall_seconds";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Teacher,
    Ta,
    Student,
}

impl ModelRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Teacher => "teacher",
            ModelRole::Ta => "ta",
            ModelRole::Student => "student",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(ModelRole::Teacher),
            "ta" => Ok(ModelRole::Ta),
            "student" => Ok(ModelRole::Student),
            other => Err(Error::Format(format!("unknown model role {other:?}"))),
        }
    }
}

/// One persisted results row. `epoch` is a number or `final`.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub dataset: String,
    pub condition: String,
    pub model_role: ModelRole,
    pub model_size: usize,
    pub epoch: String,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.9},{:.9},{:.3}",
            self.run_id,
            self.seed,
            self.dataset,
            self.condition,
            self.model_role.as_str(),
            self.model_size,
            self.epoch,
            self.loss,
            self.accuracy,
            self.wall_seconds
        )
    }
}

/// Appends records to `path`, writing the header first when the file is
/// new or empty.
pub fn append_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = match fs::read_to_string(path) {
        Ok(existing) if !existing.is_empty() => existing,
        _ => format!("{METRICS_HEADER}\n"),
    };
    for r in records {
        text.push_str(&r.to_csv_line());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads a metrics CSV, validating the header.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        Some(h) => {
            return Err(Error::Format(format!(
                "metrics header mismatch:\n  expected {METRICS_HEADER}\n  found    {h}"
            )))
        }
        None => return Err(Error::Format("metrics file is empty".into())),
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Format(format!(
                "metrics line {}: expected 10 fields, found {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("metrics line {}: bad {what}: {e}", lineno + 2)))
        };
        out.push(MetricsRecord {
            run_id: fields[0].to_string(),
            seed: fields[1]
                .parse()
                .map_err(|e| Error::Format(format!("metrics line {}: bad seed: {e}", lineno + 2)))?,
            dataset: fields[2].to_string(),
            condition: fields[3].to_string(),
            model_role: ModelRole::parse(fields[4])?,
            model_size: fields[5].parse().map_err(|e| {
                Error::Format(format!("metrics line {}: bad model size: {e}", lineno + 2))
            })?,
            epoch: fields[6].to_string(),
            loss: parse_f(fields[7], "loss")?,
            accuracy: parse_f(fields[8], "accuracy")?,
            wall_seconds: parse_f(fields[9], "wall_seconds")?,
        });
    }
    Ok(out)
}

/// Full-scale reference accuracies (percent) for the five ladder
/// conditions, reported alongside desk-scale results for context.
const FULL_SCALE_REFERENCE: &[(&str, &str, f64)] = &[
    ("standalone", "cifar10", 48.01),
    ("standalone", "cifar100", 40.18),
    ("standalone", "mnist", 85.41),
    ("baseline_kd", "cifar10", 49.32),
    ("baseline_kd", "cifar100", 41.21),
    ("baseline_kd", "mnist", 86.59),
    ("single_ta", "cifar10", 50.21),
    ("single_ta", "cifar100", 42.08),
    ("single_ta", "mnist", 87.73),
    ("ensemble_simple", "cifar10", 51.34),
    ("ensemble_simple", "cifar100", 43.36),
    ("ensemble_simple", "mnist", 88.34),
    ("ensemble_weighted", "cifar10", 52.22),
    ("ensemble_weighted", "cifar100", 44.79),
    ("ensemble_weighted", "mnist", 89.61),
];

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-condition summary of final student accuracy across seeds.
#[derive(Debug, Clone)]
pub struct ConditionSummary {
    pub condition: String,
    pub seeds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Collects final student rows per condition from raw records.
pub fn summarize_conditions(records: &[MetricsRecord]) -> Vec<ConditionSummary> {
    let mut by_condition: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.model_role == ModelRole::Student && r.epoch == "final" {
            by_condition.entry(r.condition.clone()).or_default().push(r.accuracy);
        }
    }
    by_condition
        .into_iter()
        .map(|(condition, accs)| {
            let (mean, std) = mean_std(&accs);
            ConditionSummary {
                condition,
                seeds: accs.len(),
                mean_accuracy: mean,
                std_accuracy: std,
            }
        })
        .collect()
}

/// Writes `report.txt` summarizing the metrics in `output_dir`.
///
/// Includes mean and standard deviation of final student accuracy per
/// condition, pairwise condition deltas, a full-scale reference table,
/// and (when a sweep ran) student accuracy by teacher depth.
pub fn emit_report(output_dir: &Path) -> Result<PathBuf> {
    let metrics_path = output_dir.join("metrics.csv");
    let records = read_metrics(&metrics_path).map_err(|e| {
        Error::Domain(format!(
            "no completed runs to report under {}: {e}",
            output_dir.display()
        ))
    })?;
    let summaries = summarize_conditions(&records);
    if summaries.is_empty() {
        return Err(Error::Domain(format!(
            "no completed student runs recorded in {}",
            metrics_path.display()
        )));
    }
    let dataset = records.first().map(|r| r.dataset.clone()).unwrap_or_default();

    let mut text = String::new();
    let _ = writeln!(text, "experiment report");
    let _ = writeln!(text, "dataset: {dataset}");
    let _ = writeln!(text);
    let _ = writeln!(text, "final student accuracy by condition (mean +/- std over seeds)");
    for s in &summaries {
        let reference = FULL_SCALE_REFERENCE
            .iter()
            .find(|(c, d, _)| *c == s.condition && *d == dataset)
            .map(|(_, _, acc)| format!("   full-scale reference: {acc:.2}%"))
            .unwrap_or_default();
        let _ = writeln!(
            text,
            "  {:<18} {:.4} +/- {:.4}  ({} seeds){reference}",
            s.condition, s.mean_accuracy, s.std_accuracy, s.seeds
        );
    }

    let _ = writeln!(text);
    let _ = writeln!(text, "pairwise mean-accuracy deltas (row minus column, percentage points)");
    for a in &summaries {
        for b in &summaries {
            if a.condition < b.condition {
                let _ = writeln!(
                    text,
                    "  {} - {}: {:+.2}",
                    a.condition,
                    b.condition,
                    (a.mean_accuracy - b.mean_accuracy) * 100.0
                );
            }
        }
    }

    // Teacher-depth sweep table, present when gap-sweep conditions ran.
    let mut sweep: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &records {
        if r.model_role == ModelRole::Student && r.epoch == "final" {
            if let Some(size) = r.condition.strip_prefix("gap_sweep_teacher") {
                if let Ok(size) = size.parse::<usize>() {
                    sweep.entry(size).or_default().push(r.accuracy);
                }
            }
        }
    }
    if !sweep.is_empty() {
        let _ = writeln!(text);
        let _ = writeln!(text, "student accuracy by teacher depth (direct distillation)");
        for (size, accs) in &sweep {
            let (mean, std) = mean_std(accs);
            let _ = writeln!(text, "  teacher size {size:>2}: {mean:.4} +/- {std:.4}");
        }
    }

    let report_path = output_dir.join("report.txt");
    fs::write(&report_path, text)?;
    Ok(report_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(condition: &str, seed: u64, accuracy: f64) -> MetricsRecord {
        MetricsRecord {
            run_id: format!("toy-seed{seed}"),
            seed,
            dataset: "toy".into(),
            condition: condition.into(),
            model_role: ModelRole::Student,
            model_size: 2,
            epoch: "final".into(),
            loss: 0.5,
            accuracy,
            wall_seconds: 1.0,
        }
    }

    #[test]
    fn csv_round_trip_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        append_metrics(&path, &[record("standalone", 1, 0.75)]).unwrap();
        append_metrics(&path, &[record("baseline_kd", 1, 0.8125)]).unwrap();
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].condition, "standalone");
        assert_eq!(rows[0].accuracy, 0.75);
        assert_eq!(rows[1].accuracy, 0.8125);
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        fs::write(&path, "run,id\n1,2\n").unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Format(_))));
    }

    #[test]
    fn summary_mean_and_std_match_hand_computation() {
        let records = vec![
            record("standalone", 1, 0.7),
            record("standalone", 2, 0.8),
            record("standalone", 3, 0.9),
            record("baseline_kd", 1, 0.9),
        ];
        let summaries = summarize_conditions(&records);
        assert_eq!(summaries.len(), 2);
        let standalone = summaries.iter().find(|s| s.condition == "standalone").unwrap();
        assert!((standalone.mean_accuracy - 0.8).abs() < 1e-12);
        let expected_std = (((0.1f64).powi(2) * 2.0) / 3.0).sqrt();
        assert!((standalone.std_accuracy - expected_std).abs() < 1e-12);
    }

    #[test]
    fn report_requires_completed_runs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(dir.path()), Err(Error::Domain(_))));
    }

    #[test]
    fn report_writes_rows_and_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        append_metrics(&path, &[record("standalone", 1, 0.7), record("baseline_kd", 1, 0.8)])
            .unwrap();
        let report = emit_report(dir.path()).unwrap();
        let text = fs::read_to_string(report).unwrap();
        assert!(text.contains("standalone"), "{text}");
        assert!(text.contains("baseline_kd - standalone: +10.00"), "{text}");
    }
}
