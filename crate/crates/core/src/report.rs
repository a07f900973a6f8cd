//! Tables in the familiar layout, pre/post comparisons and cross-method
//! rank correlation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::result::{DetectorResult, Method, Metric, Outcome};
use crate::stats::spearman;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Markdown,
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}` (markdown, csv, json)")),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Markdown => "markdown",
            Format::Csv => "csv",
            Format::Json => "json",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no results to report")]
    Empty,
    #[error("correlation needs at least two result rows sharing two methods")]
    TooFewRows,
}

pub const UNAVAILABLE: &str = "-";
pub const FAILED: &str = "ERR";

pub fn cell(result: Option<&DetectorResult>) -> String {
    match result.map(|r| &r.outcome) {
        Some(Outcome::Completed { metric, .. }) => metric.cell(),
        Some(Outcome::Failed { .. }) => FAILED.to_string(),
        Some(Outcome::Unavailable { .. }) | None => UNAVAILABLE.to_string(),
    }
}

type RowKey = (String, String, String);

/// Results grouped by (model, dataset, split); later results replace earlier
/// ones for the same method.
fn rows(results: &[DetectorResult]) -> BTreeMap<RowKey, BTreeMap<Method, &DetectorResult>> {
    let mut out: BTreeMap<RowKey, BTreeMap<Method, &DetectorResult>> = BTreeMap::new();
    for r in results {
        out.entry((r.model.clone(), r.dataset.clone(), r.split.clone()))
            .or_default()
            .insert(r.method, r);
    }
    out
}

fn markdown_table(header: &[String], body: &[Vec<String>]) -> String {
    let mut s = format!("| {} |\n", header.join(" | "));
    s.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for row in body {
        s.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    s
}

fn csv_table(header: &[String], body: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in body {
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

fn json_text(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

const FOOTNOTES: &str = "\
Cells: accuracy for WPQ and Local Order; exact/near/p-value for Token Overlap; \
mean_{std} for Min-K%; p-value for Canonical Order. \"-\" marks a method the model \
does not support, \"ERR\" a failed run.

Min-K% unit: mean NLL of min-k tokens (larger means less probable).

WPQ: accuracy over items with a valid perturbation. The perturbed options can read \
less fluently than the original, which may let a model spot the original without \
having seen it.
";

pub fn render_report(results: &[DetectorResult], format: Format) -> Result<String, ReportError> {
    if results.is_empty() {
        return Err(ReportError::Empty);
    }
    let grouped = rows(results);
    let mut header: Vec<String> = ["Model", "Dataset", "Split"].map(String::from).to_vec();
    header.extend(Method::ALL.iter().map(|m| m.title().to_string()));
    let body: Vec<Vec<String>> = grouped
        .iter()
        .map(|((model, dataset, split), by_method)| {
            let mut row = vec![model.clone(), dataset.clone(), split.clone()];
            row.extend(Method::ALL.iter().map(|m| cell(by_method.get(m).copied())));
            row
        })
        .collect();
    Ok(match format {
        Format::Markdown => format!("{}\n{FOOTNOTES}", markdown_table(&header, &body)),
        Format::Csv => csv_table(&header, &body),
        Format::Json => {
            let rows: Vec<Value> = grouped
                .iter()
                .map(|((model, dataset, split), by_method)| {
                    let cells: BTreeMap<&str, String> = Method::ALL
                        .iter()
                        .map(|m| (m.as_str(), cell(by_method.get(m).copied())))
                        .collect();
                    let metrics: BTreeMap<&str, Option<&Metric>> = Method::ALL
                        .iter()
                        .map(|m| (m.as_str(), by_method.get(m).and_then(|r| r.metric())))
                        .collect();
                    json!({"model": model, "dataset": dataset, "split": split, "cells": cells, "metrics": metrics})
                })
                .collect();
            json_text(&json!({ "rows": rows }))
        }
    })
}

/// Joins two result sets on (method, dataset, split), e.g. before and after
/// fine-tuning on contaminated data.
pub fn render_compare(
    before: &[DetectorResult],
    after: &[DetectorResult],
    format: Format,
) -> Result<String, ReportError> {
    if before.is_empty() && after.is_empty() {
        return Err(ReportError::Empty);
    }
    type Key = (String, String, Method);
    let index = |rs: &[DetectorResult]| -> BTreeMap<Key, DetectorResult> {
        rs.iter()
            .map(|r| ((r.dataset.clone(), r.split.clone(), r.method), r.clone()))
            .collect()
    };
    let (b, a) = (index(before), index(after));
    let mut keys: Vec<&Key> = b.keys().chain(a.keys()).collect();
    keys.sort();
    keys.dedup();
    let model = |rs: &[DetectorResult]| {
        let mut ids: Vec<&str> = rs.iter().map(|r| r.model.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.join(", ")
    };
    let header = vec![
        "Dataset".to_string(),
        "Split".to_string(),
        "Method".to_string(),
        format!("Before ({})", model(before)),
        format!("After ({})", model(after)),
    ];
    let body: Vec<Vec<String>> = keys
        .iter()
        .map(|k| {
            vec![
                k.0.clone(),
                k.1.clone(),
                k.2.title().to_string(),
                cell(b.get(*k)),
                cell(a.get(*k)),
            ]
        })
        .collect();
    Ok(match format {
        Format::Markdown => markdown_table(&header, &body),
        Format::Csv => csv_table(&header, &body),
        Format::Json => {
            let rows: Vec<Value> = keys
                .iter()
                .map(|k| {
                    json!({
                        "dataset": k.0, "split": k.1, "method": k.2,
                        "before": cell(b.get(*k)), "after": cell(a.get(*k)),
                        "before_metric": b.get(*k).and_then(|r| r.metric()),
                        "after_metric": a.get(*k).and_then(|r| r.metric()),
                    })
                })
                .collect();
            json_text(&json!({ "rows": rows }))
        }
    })
}

/// How metrics are signed before ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Larger always means "more contaminated": p-values and Min-K% NLL are
    /// negated, accuracies kept.
    #[default]
    ContaminationIncreasing,
    /// Metrics as reported.
    Raw,
}

impl FromStr for Orientation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "contamination-increasing" => Ok(Orientation::ContaminationIncreasing),
            "raw" => Ok(Orientation::Raw),
            other => Err(format!("unknown orientation `{other}` (contamination-increasing, raw)")),
        }
    }
}

/// Scalar used for ranking.
pub fn oriented_value(metric: &Metric, orientation: Orientation) -> f64 {
    let (v, flip) = match metric {
        Metric::Accuracy { accuracy, .. } => (*accuracy, false),
        Metric::Overlap { p_value, .. } => (*p_value, true),
        Metric::MeanStd { mean, .. } => (*mean, true),
        Metric::PValue { p_value, .. } => (*p_value, true),
    };
    if flip && orientation == Orientation::ContaminationIncreasing {
        -v
    } else {
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub methods: Vec<Method>,
    /// `None` where fewer than two rows are shared or a vector is constant.
    pub rho: Vec<Vec<Option<f64>>>,
    /// Rows with both methods present.
    pub n: Vec<Vec<usize>>,
    pub orientation: Orientation,
    pub total_rows: usize,
}

pub fn correlate_methods(results: &[DetectorResult], orientation: Orientation) -> Result<CorrelationMatrix, ReportError> {
    let grouped = rows(results);
    let values: Vec<BTreeMap<Method, f64>> = grouped
        .values()
        .map(|by_method| {
            by_method
                .iter()
                .filter_map(|(m, r)| r.metric().map(|x| (*m, oriented_value(x, orientation))))
                .collect()
        })
        .collect();
    let usable = values.iter().filter(|v| v.len() >= 2).count();
    if usable < 2 {
        return Err(ReportError::TooFewRows);
    }
    let methods = Method::ALL.to_vec();
    let k = methods.len();
    let mut rho = vec![vec![None; k]; k];
    let mut n = vec![vec![0; k]; k];
    for i in 0..k {
        for j in i..k {
            let (x, y): (Vec<f64>, Vec<f64>) = values
                .iter()
                .filter_map(|row| Some((*row.get(&methods[i])?, *row.get(&methods[j])?)))
                .unzip();
            let r = spearman(&x, &y).ok();
            let r = if i == j { r.map(|_| 1.0) } else { r };
            rho[i][j] = r;
            rho[j][i] = r;
            n[i][j] = x.len();
            n[j][i] = x.len();
        }
    }
    Ok(CorrelationMatrix {
        methods,
        rho,
        n,
        orientation,
        total_rows: grouped.len(),
    })
}

pub fn render_correlation(m: &CorrelationMatrix, format: Format) -> String {
    let mut header = vec![String::new()];
    header.extend(m.methods.iter().map(|x| x.title().to_string()));
    let body: Vec<Vec<String>> = m
        .methods
        .iter()
        .enumerate()
        .map(|(i, method)| {
            let mut row = vec![method.title().to_string()];
            row.extend(m.rho[i].iter().map(|r| match r {
                Some(v) => format!("{v:.3}"),
                None => "n/a".to_string(),
            }));
            row
        })
        .collect();
    match format {
        Format::Markdown => {
            let mut s = markdown_table(&header, &body);
            let orientation = match m.orientation {
                Orientation::ContaminationIncreasing => {
                    "p-values and Min-K% NLL negated so larger means more contaminated"
                }
                Orientation::Raw => "metrics as reported",
            };
            s.push_str(&format!(
                "\nSpearman rho over {} rows ({orientation}); rows missing either method are dropped pairwise. \"n/a\": fewer than two shared rows or a constant vector.\n",
                m.total_rows
            ));
            s
        }
        Format::Csv => csv_table(&header, &body),
        Format::Json => json_text(&serde_json::to_value(m).expect("matrix serializes")),
    }
}
