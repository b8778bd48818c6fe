//! Success-rate curves and a summary table from one or more metrics logs.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::metrics::MetricsRecord;
use super::svg::{line_chart, Series};

/// Metric name of a holdout success rate.
pub fn eval_metric(task: &str, field: &str) -> String {
    format!("eval/{task}/{field}")
}

fn parse_eval_name(name: &str) -> Option<(&str, &str)> {
    let rest = name.strip_prefix("eval/")?;
    let (task, field) = rest.rsplit_once('/')?;
    Some((task, field))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub run: String,
    pub task: String,
    pub step: u64,
    pub success_rate: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    /// One chart per task, keyed by task name.
    pub charts: BTreeMap<String, String>,
    pub summary: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn summary_table(&self) -> String {
        let mut s = String::from("| run | task | step | success | 99% CI |\n|---|---|---|---|---|\n");
        for r in &self.summary {
            let ci = match (r.ci_low, r.ci_high) {
                (Some(lo), Some(hi)) => format!("[{lo:.3}, {hi:.3}]"),
                _ => "n/a".into(),
            };
            let _ = writeln!(s, "| {} | {} | {} | {:.3} | {} |", r.run, r.task, r.step, r.success_rate, ci);
        }
        s
    }
}

/// Builds per-task curves with one series per run.
pub fn build_report(runs: &[(String, Vec<MetricsRecord>)]) -> Report {
    let mut report = Report::default();
    // task -> run -> field -> step -> value
    let mut data: BTreeMap<String, BTreeMap<String, BTreeMap<String, BTreeMap<u64, f64>>>> = BTreeMap::new();
    for (run, records) in runs {
        if records.is_empty() {
            report.warnings.push(format!("{run}: metrics log is empty"));
        }
        for r in records {
            if let Some((task, field)) = parse_eval_name(&r.name) {
                data.entry(task.to_string())
                    .or_default()
                    .entry(run.clone())
                    .or_default()
                    .entry(field.to_string())
                    .or_default()
                    .insert(r.step, r.value);
            }
        }
    }
    if data.is_empty() && !runs.is_empty() {
        report.warnings.push("no holdout evaluations found".into());
    }
    for (task, per_run) in &data {
        let mut series = Vec::new();
        for (run, fields) in per_run {
            let Some(rates) = fields.get("success_rate") else { continue };
            series.push(Series { label: run.clone(), points: rates.iter().map(|(&s, &v)| (s as f64, v)).collect() });
            if let Some((&step, &rate)) = rates.iter().next_back() {
                let at = |f: &str| fields.get(f).and_then(|m| m.get(&step)).copied();
                report.summary.push(SummaryRow {
                    run: run.clone(),
                    task: task.clone(),
                    step,
                    success_rate: rate,
                    ci_low: at("ci_low"),
                    ci_high: at("ci_high"),
                });
            }
        }
        report.charts.insert(task.clone(), line_chart(task, "optimizer step", "success rate", &series, (0.0, 1.0)));
    }
    report
}
