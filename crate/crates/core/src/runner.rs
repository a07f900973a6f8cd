//! Executes a run config: every enabled detector against every dataset,
//! persisting one result file per pair.
//!
//! Store layout: `<out>/<run-id>/config.json`, `<out>/<run-id>/journal.jsonl`
//! (remote backends only) and `<out>/<run-id>/<method>/<dataset>-<split>.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, BackendSpec, Journal, ReplayIndex, SharedBackend};
use crate::config::{pair_seed, DatasetEntry, RunConfig};
use crate::dataset::Dataset;
use crate::detectors::{self, DetectorError};
use crate::result::{self, DetectorResult, Method, Metric, Outcome};
use crate::TOOLKIT_VERSION;

pub const DEFAULT_WORKERS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("backend setup failed: {0}")]
    Backend(#[from] BackendError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the config's output directory.
    pub output_dir: Option<PathBuf>,
    /// Overrides the config's worker count.
    pub workers: Option<usize>,
    /// Answer remote calls from a recorded journal.
    pub replay: Option<Arc<ReplayIndex>>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub results: Vec<DetectorResult>,
}

impl RunSummary {
    pub fn failures(&self) -> usize {
        self.results
            .iter()
            .filter(|r| matches!(r.outcome, Outcome::Failed { .. }))
            .count()
    }
}

fn file_digest(path: Option<&Path>) -> String {
    match path.map(std::fs::read) {
        Some(Ok(bytes)) => hex::encode(Sha256::digest(&bytes)),
        _ => "unavailable".into(),
    }
}

/// The parts of a config that determine its results: seed, backends,
/// detector parameters and dataset contents (not their paths).
pub fn identity(config: &RunConfig) -> Value {
    let datasets: Vec<Value> = config
        .datasets
        .iter()
        .map(|d| {
            let file = d
                .path
                .clone()
                .or_else(|| d.registry.as_ref().map(|r| r.join(&d.name).join(format!("{}.jsonl", d.split))));
            json!({
                "name": d.name,
                "split": d.split,
                "description": d.description,
                "sha256": file_digest(file.as_deref()),
            })
        })
        .collect();
    json!({
        "toolkit_version": TOOLKIT_VERSION,
        "seed": config.seed,
        "backends": config.backends,
        "detectors": config.detectors,
        "datasets": datasets,
    })
}

/// Content address of a run: the first 16 hex digits of the SHA-256 of its
/// identity.
pub fn run_id(config: &RunConfig) -> String {
    let canonical = serde_json::to_string(&identity(config)).expect("identity serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
}

pub fn result_path(run_dir: &Path, method: Method, dataset: &str, split: &str) -> PathBuf {
    run_dir.join(method.as_str()).join(format!("{dataset}-{split}.json"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    crate::write_atomic(path, bytes).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn to_pretty_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

struct Backends {
    subject: SharedBackend,
    generator: SharedBackend,
    judge: SharedBackend,
}

fn build_backends(config: &RunConfig, run_dir: &Path, replay: Option<&Arc<ReplayIndex>>) -> Result<Backends, RunError> {
    let specs = [&config.backends.subject, config.generator(), config.judge()];
    let journal = match replay {
        None if specs.iter().any(|s| s.is_remote()) => {
            let path = run_dir.join("journal.jsonl");
            Some(Arc::new(Journal::open(&path).map_err(|source| RunError::Io { path, source })?))
        }
        _ => None,
    };
    let build = |spec: &BackendSpec| -> Result<SharedBackend, BackendError> {
        match replay {
            Some(index) => spec.build_replay(index),
            None => spec.build(journal.clone()),
        }
    };
    let subject = build(specs[0])?;
    let share = |spec: &BackendSpec| -> Result<SharedBackend, BackendError> {
        if spec == specs[0] {
            Ok(subject.clone())
        } else {
            build(spec)
        }
    };
    Ok(Backends {
        generator: share(specs[1])?,
        judge: share(specs[2])?,
        subject,
    })
}

fn run_detector(
    method: Method,
    config: &RunConfig,
    backends: &Backends,
    dataset: &Dataset,
    seed: u64,
) -> Result<(Metric, Value), DetectorError> {
    let d = &config.detectors;
    let subject = backends.subject.as_ref();
    let details = |v: Result<Value, serde_json::Error>| v.expect("report serializes");
    Ok(match method {
        Method::Wpq => {
            let r = detectors::run_wpq_detector(
                subject,
                backends.generator.as_ref(),
                dataset,
                d.wpq.as_ref().expect("enabled"),
                seed,
            )?;
            (result::wpq_metric(&r), details(serde_json::to_value(&r)))
        }
        Method::LocalOrder => {
            let r = detectors::run_local_order_quiz(subject, dataset, d.local_order.as_ref().expect("enabled"), seed)?;
            (result::local_order_metric(&r), details(serde_json::to_value(&r)))
        }
        Method::TokenOverlap => {
            let r = detectors::run_token_overlap(
                subject,
                backends.judge.as_ref(),
                dataset,
                d.token_overlap.as_ref().expect("enabled"),
                seed,
            )?;
            (result::overlap_metric(&r), details(serde_json::to_value(&r)))
        }
        Method::MinK => {
            let r = detectors::min_k_split_report(subject, dataset, d.min_k.as_ref().expect("enabled"), seed)?;
            (result::min_k_metric(&r), details(serde_json::to_value(&r)))
        }
        Method::CanonicalOrder => {
            let r = detectors::canonical_order_pvalue(
                subject,
                dataset,
                d.canonical_order.as_ref().expect("enabled"),
                seed,
            )?;
            (result::canonical_metric(&r), details(serde_json::to_value(&r)))
        }
    })
}

fn execute_pair(
    method: Method,
    entry: &DatasetEntry,
    dataset: &Result<Dataset, String>,
    config: &RunConfig,
    backends: &Backends,
) -> DetectorResult {
    let seed = pair_seed(config.seed, method, &entry.name, entry.split);
    let mut helpers = BTreeMap::new();
    match method {
        Method::Wpq => {
            helpers.insert("generator".to_string(), backends.generator.model_id().to_string());
        }
        Method::TokenOverlap => {
            helpers.insert("judge".to_string(), backends.judge.model_id().to_string());
        }
        _ => {}
    }
    let outcome = match dataset {
        Err(e) => Outcome::Failed {
            error: format!("dataset `{}`: {e}", entry.name),
        },
        Ok(ds) => match run_detector(method, config, backends, ds, seed) {
            Ok((metric, details)) => Outcome::Completed { metric, details },
            Err(e) if e.is_capability() => Outcome::Unavailable { reason: e.to_string() },
            Err(e) => Outcome::Failed { error: e.to_string() },
        },
    };
    match &outcome {
        Outcome::Completed { metric, .. } => {
            log::info!("{method} on {}/{}: {}", entry.name, entry.split, metric.cell())
        }
        Outcome::Unavailable { reason } => log::info!("{method} on {}/{}: unavailable ({reason})", entry.name, entry.split),
        Outcome::Failed { error } => log::error!("{method} on {}/{}: {error}", entry.name, entry.split),
    }
    DetectorResult {
        method,
        model: backends.subject.model_id().to_string(),
        dataset: entry.name.clone(),
        split: entry.split.to_string(),
        seed,
        toolkit_version: TOOLKIT_VERSION.to_string(),
        params: config.detectors.params(method),
        helpers,
        outcome,
    }
}

/// Runs every (detector, dataset) pair and writes the result store. Pair
/// failures are recorded in their result files, not returned as errors.
pub fn run_config(config: &RunConfig, opts: &RunOptions) -> Result<RunSummary, RunError> {
    let out = opts
        .output_dir
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let workers = opts.workers.or(config.workers).unwrap_or(DEFAULT_WORKERS).max(1);
    let id = run_id(config);
    let run_dir = out.join(&id);

    let mut stored = config.clone();
    stored.output_dir = None;
    stored.workers = None;
    write_atomic(&run_dir.join("config.json"), to_pretty_json(&stored).as_bytes())?;

    let backends = build_backends(config, &run_dir, opts.replay.as_ref())?;
    let datasets: Vec<Result<Dataset, String>> = config
        .datasets
        .iter()
        .map(|d| {
            d.load().map_err(|e| {
                log::error!("dataset `{}` ({}): {e}", d.name, d.split);
                e.to_string()
            })
        })
        .collect();
    let jobs: Vec<(Method, usize)> = (0..config.datasets.len())
        .flat_map(|i| config.detectors.enabled().into_iter().map(move |m| (m, i)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    let results: Vec<DetectorResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, i)| execute_pair(m, &config.datasets[i], &datasets[i], config, &backends))
            .collect()
    });

    for r in &results {
        write_atomic(
            &result_path(&run_dir, r.method, &r.dataset, &r.split),
            to_pretty_json(r).as_bytes(),
        )?;
    }
    Ok(RunSummary {
        run_id: id,
        run_dir,
        results,
    })
}
