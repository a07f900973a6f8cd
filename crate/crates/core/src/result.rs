//! Persisted detector results and their headline metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detectors::canonical::CanonicalOrderResult;
use crate::detectors::local_order::LocalOrderReport;
use crate::detectors::min_k::MinKResult;
use crate::detectors::overlap::OverlapReport;
use crate::detectors::wpq::{WpqReport, DISTRACTORS};
use crate::detectors::{accuracy, QuizRecord};
use crate::rng;
use crate::stats::{bootstrap_pvalue, summarize};
use crate::text_metrics::{option_letters, parse_choice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Wpq,
    LocalOrder,
    TokenOverlap,
    MinK,
    CanonicalOrder,
}

impl Method {
    /// Report column order.
    pub const ALL: [Method; 5] = [
        Method::Wpq,
        Method::LocalOrder,
        Method::TokenOverlap,
        Method::MinK,
        Method::CanonicalOrder,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Wpq => "wpq",
            Method::LocalOrder => "local_order",
            Method::TokenOverlap => "token_overlap",
            Method::MinK => "min_k",
            Method::CanonicalOrder => "canonical_order",
        }
    }

    pub fn title(&self) -> &'static str {
        match self {
            Method::Wpq => "WPQ",
            Method::LocalOrder => "Local Order",
            Method::TokenOverlap => "Token Overlap",
            Method::MinK => "Min-K%",
            Method::CanonicalOrder => "Canonical Order",
        }
    }

    pub fn needs_token_scoring(&self) -> bool {
        matches!(self, Method::MinK | Method::CanonicalOrder)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// Headline number(s) of one result, in the table's units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    Accuracy {
        accuracy: f64,
        n_items: usize,
        n_correct: usize,
        /// Items excluded before the quiz (failed perturbations, skipped draws).
        excluded: usize,
        /// Accuracy with excluded items counted as incorrect.
        raw_accuracy: f64,
    },
    Overlap {
        exact: usize,
        near: usize,
        p_value: f64,
        contaminated: bool,
    },
    /// Min-K%: mean and population std of per-instance NLL scores.
    MeanStd { mean: f64, std: f64, n: usize },
    PValue { p_value: f64, df: u64 },
}

impl Metric {
    /// Table cell text.
    pub fn cell(&self) -> String {
        match self {
            Metric::Accuracy { accuracy, .. } => format!("{accuracy:.2}"),
            Metric::Overlap {
                exact, near, p_value, ..
            } => format!("{exact}/{near}/{p_value:.2}"),
            Metric::MeanStd { mean, std, .. } => format!("{mean:.2}_{{{std:.1}}}"),
            Metric::PValue { p_value, .. } => format!("{p_value:.2}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed { metric: Metric, details: Value },
    /// The subject lacks a capability the method needs.
    Unavailable { reason: String },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorResult {
    pub method: Method,
    pub model: String,
    pub dataset: String,
    pub split: String,
    /// Seed the detector ran with (derived from the run's master seed).
    pub seed: u64,
    pub toolkit_version: String,
    pub params: Value,
    /// Other models involved, by role (generator, judge).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub helpers: BTreeMap<String, String>,
    pub outcome: Outcome,
}

#[derive(Debug, thiserror::Error)]
pub enum ResultError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("stored details do not match method {method}: {message}")]
    Details { method: Method, message: String },
}

pub fn quiz_metric(items: &[QuizRecord], excluded: usize) -> Metric {
    let n_items = items.len();
    let n_correct = items.iter().filter(|r| r.correct).count();
    Metric::Accuracy {
        accuracy: accuracy(n_correct, n_items),
        n_items,
        n_correct,
        excluded,
        raw_accuracy: accuracy(n_correct, n_items + excluded),
    }
}

pub fn wpq_metric(r: &WpqReport) -> Metric {
    quiz_metric(&r.quiz.items, r.failures.len())
}

pub fn local_order_metric(r: &LocalOrderReport) -> Metric {
    quiz_metric(&r.quiz.items, r.skipped.len())
}

pub fn overlap_metric(r: &OverlapReport) -> Metric {
    Metric::Overlap {
        exact: r.exact_count,
        near: r.near_count,
        p_value: r.p_value.value,
        contaminated: r.contaminated,
    }
}

pub fn min_k_metric(r: &MinKResult) -> Metric {
    Metric::MeanStd {
        mean: r.summary.mean,
        std: r.summary.std,
        n: r.summary.n,
    }
}

pub fn canonical_metric(r: &CanonicalOrderResult) -> Metric {
    Metric::PValue {
        p_value: r.p_value.value,
        df: r.p_value.resamples_or_df,
    }
}

/// Regrades quiz records from the stored raw responses.
fn regrade(items: &[QuizRecord], n_options: usize) -> Vec<QuizRecord> {
    let allowed = option_letters(n_options);
    items
        .iter()
        .map(|r| {
            let parsed = parse_choice(&r.response, &allowed).letter;
            QuizRecord {
                parsed,
                correct: parsed == Some(r.correct_letter),
                ..r.clone()
            }
        })
        .collect()
}

impl DetectorResult {
    pub fn metric(&self) -> Option<&Metric> {
        match &self.outcome {
            Outcome::Completed { metric, .. } => Some(metric),
            _ => None,
        }
    }

    /// Recomputes the headline metric from the stored per-instance records.
    /// `None` when the result has no records (unavailable or failed).
    pub fn recompute_metric(&self) -> Option<Result<Metric, ResultError>> {
        let Outcome::Completed { details, .. } = &self.outcome else {
            return None;
        };
        let err = |message: String| ResultError::Details {
            method: self.method,
            message,
        };
        fn parse<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, String> {
            serde_json::from_value(v.clone()).map_err(|e| e.to_string())
        }
        let metric = (|| -> Result<Metric, ResultError> {
            Ok(match self.method {
                Method::Wpq => {
                    let r: WpqReport = parse(details).map_err(err)?;
                    quiz_metric(&regrade(&r.quiz.items, DISTRACTORS + 2), r.failures.len())
                }
                Method::LocalOrder => {
                    let r: LocalOrderReport = parse(details).map_err(err)?;
                    let n_options = self.params.get("n_options").and_then(Value::as_u64).unwrap_or(4) as usize;
                    quiz_metric(&regrade(&r.quiz.items, n_options), r.skipped.len())
                }
                Method::TokenOverlap => {
                    let r: OverlapReport = parse(details).map_err(err)?;
                    let guided: Vec<f64> = r.trials.iter().map(|t| t.guided_rouge.f1).collect();
                    let general: Vec<f64> = r.trials.iter().map(|t| t.general_rouge.f1).collect();
                    let p = bootstrap_pvalue(
                        &guided,
                        &general,
                        r.p_value.resamples_or_df as usize,
                        rng::derive_seed(self.seed, &[rng::TAG_BOOTSTRAP]),
                    )
                    .map_err(|e| err(e.to_string()))?;
                    let exact = r.trials.iter().filter(|t| t.exact).count();
                    let near = r.trials.iter().filter(|t| t.near).count();
                    Metric::Overlap {
                        exact,
                        near,
                        p_value: p.value,
                        contaminated: crate::detectors::is_contaminated(exact, near),
                    }
                }
                Method::MinK => {
                    let r: MinKResult = parse(details).map_err(err)?;
                    let scores: Vec<f64> = r.per_instance.iter().map(|s| s.score).collect();
                    let s = summarize(&scores).map_err(|e| err(e.to_string()))?;
                    Metric::MeanStd {
                        mean: s.mean,
                        std: s.std,
                        n: s.n,
                    }
                }
                Method::CanonicalOrder => {
                    let r: CanonicalOrderResult = parse(details).map_err(err)?;
                    let p = CanonicalOrderResult::recompute_p_value(&r.per_shard).map_err(|e| err(e.to_string()))?;
                    Metric::PValue {
                        p_value: p.value,
                        df: p.resamples_or_df,
                    }
                }
            })
        })();
        Some(metric)
    }
}

/// Reads every result file below `path` (a result file, a run directory or a
/// directory of runs). Files that are not results are ignored.
pub fn load_results(path: &Path) -> Result<Vec<DetectorResult>, ResultError> {
    let mut files = Vec::new();
    collect_json(path, &mut files)?;
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|source| ResultError::Io {
            path: f.clone(),
            source,
        })?;
        let Ok(v) = serde_json::from_str::<Value>(&text) else {
            continue;
        };
        if v.get("method").is_none() || v.get("outcome").is_none() {
            continue;
        }
        let r = serde_json::from_value(v).map_err(|e| ResultError::Parse {
            path: f.clone(),
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

fn collect_json(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), ResultError> {
    let io = |source| ResultError::Io {
        path: path.to_path_buf(),
        source,
    };
    if path.is_file() {
        if path.extension().is_some_and(|e| e == "json") {
            out.push(path.to_path_buf());
        }
        return Ok(());
    }
    for entry in std::fs::read_dir(path).map_err(io)? {
        collect_json(&entry.map_err(io)?.path(), out)?;
    }
    Ok(())
}
