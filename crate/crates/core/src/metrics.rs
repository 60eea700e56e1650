//! Incremental accuracy, cross-seed aggregation and their on-disk forms.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::Ablation;

/// Fraction of positions where prediction equals label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean of the per-phase accuracies.
pub fn average_incremental(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::invalid("no accuracies to average"));
    }
    if let Some(a) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::invalid(format!("accuracy {} outside [0, 1]", a)));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: usize,
    pub n_learned_classes: usize,
    pub accuracy: f64,
    pub average_accuracy: f64,
    pub timestamp: String,
}

pub fn append_metrics_row(path: &Path, row: &MetricsRow) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads rows, skipping a trailing partial record.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        match rec {
            Ok(row) => rows.push(row),
            Err(_) => break,
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub protocol: String,
    pub n_tasks: usize,
    pub ablation: Ablation,
    /// Variant name (derived from the ablation flags).
    pub variant: String,
    pub accuracies: Vec<f64>,
    pub last_accuracy: f64,
    pub average_accuracy: f64,
    pub phase_seconds: Vec<f64>,
    pub config_hash: String,
}

impl RunReport {
    pub fn new(
        seed: u64,
        protocol: &str,
        n_tasks: usize,
        ablation: Ablation,
        accuracies: Vec<f64>,
        phase_seconds: Vec<f64>,
        config_hash: &str,
    ) -> Result<Self> {
        let average_accuracy = average_incremental(&accuracies)?;
        Ok(RunReport {
            seed,
            protocol: protocol.to_string(),
            n_tasks,
            variant: ablation.label(),
            ablation,
            last_accuracy: *accuracies.last().expect("nonempty"),
            average_accuracy,
            accuracies,
            phase_seconds,
            config_hash: config_hash.to_string(),
        })
    }

    pub fn is_complete(&self) -> bool {
        self.accuracies.len() == self.n_tasks
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Mean and sample standard deviation (absent for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no values to aggregate"));
        }
        let n = values.len() as f64;
        // summing identical values can drift by an ulp
        let mean = if values.iter().all(|v| *v == values[0]) {
            values[0]
        } else {
            values.iter().sum::<f64>() / n
        };
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Ok(MeanStd { mean, std })
    }

    /// Percent with two decimals, e.g. `52.00 ± 2.00`, given fractions.
    pub fn percent(&self) -> String {
        match self.std {
            Some(s) => format!("{:.2} ± {:.2}", self.mean * 100.0, s * 100.0),
            None => format!("{:.2}", self.mean * 100.0),
        }
    }
}

/// Aggregated runs of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub protocol: String,
    pub n_tasks: usize,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub last: MeanStd,
    pub average: MeanStd,
    /// Per-phase mean accuracy (the incremental curve).
    pub curve: Vec<f64>,
}

/// Aggregate reports that share a configuration.
pub fn aggregate_runs(reports: &[RunReport]) -> Result<AggregateRow> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to aggregate"))?;
    for r in reports {
        if r.variant != first.variant || r.protocol != first.protocol || r.n_tasks != first.n_tasks {
            return Err(Error::invalid(format!(
                "mixed configurations: {}/{}/{} vs {}/{}/{}",
                first.variant, first.protocol, first.n_tasks, r.variant, r.protocol, r.n_tasks
            )));
        }
        if r.accuracies.len() != first.accuracies.len() {
            return Err(Error::invalid("reports cover different numbers of phases"));
        }
    }
    let lasts: Vec<f64> = reports.iter().map(|r| r.last_accuracy).collect();
    let avgs: Vec<f64> = reports.iter().map(|r| r.average_accuracy).collect();
    let curve = (0..first.accuracies.len())
        .map(|p| reports.iter().map(|r| r.accuracies[p]).sum::<f64>() / reports.len() as f64)
        .collect();
    Ok(AggregateRow {
        variant: first.variant.clone(),
        protocol: first.protocol.clone(),
        n_tasks: first.n_tasks,
        runs: reports.len(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        last: MeanStd::of(&lasts)?,
        average: MeanStd::of(&avgs)?,
        curve,
    })
}

/// Group by (variant, protocol, tasks) in first-seen order, then aggregate each group.
pub fn aggregate_groups(reports: &[RunReport]) -> Result<Vec<AggregateRow>> {
    let mut keys: Vec<(String, String, usize)> = Vec::new();
    for r in reports {
        let k = (r.variant.clone(), r.protocol.clone(), r.n_tasks);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.iter()
        .map(|k| {
            let group: Vec<RunReport> = reports
                .iter()
                .filter(|r| (&r.variant, &r.protocol, r.n_tasks) == (&k.0, &k.1, k.2))
                .cloned()
                .collect();
            aggregate_runs(&group)
        })
        .collect()
}

/// Plain-text table: one row per configuration with last and average accuracy.
pub fn format_table(rows: &[AggregateRow]) -> String {
    let mut out = String::new();
    let w = rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
    out.push_str(&format!(
        "{:<w$}  {:<16}  {:>5}  {:>4}  {:>16}  {:>16}\n",
        "variant", "protocol", "tasks", "runs", "A_N (%)", "avg A (%)"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<w$}  {:<16}  {:>5}  {:>4}  {:>16}  {:>16}\n",
            r.variant,
            r.protocol,
            r.n_tasks,
            r.runs,
            r.last.percent(),
            r.average.percent()
        ));
    }
    out
}

/// Flat CSV of aggregated rows.
pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("variant,protocol,n_tasks,runs,last_mean,last_std,average_mean,average_std,curve\n");
    for r in rows {
        let curve: Vec<String> = r.curve.iter().map(|v| format!("{:.6}", v)).collect();
        text.push_str(&format!(
            "{},{},{},{},{:.6},{},{:.6},{},{}\n",
            r.variant,
            r.protocol,
            r.n_tasks,
            r.runs,
            r.last.mean,
            r.last.std.map_or(String::new(), |s| format!("{:.6}", s)),
            r.average.mean,
            r.average.std.map_or(String::new(), |s| format!("{:.6}", s)),
            curve.join(";")
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
