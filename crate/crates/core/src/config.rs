//! Declarative run configuration (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::BackendSpec;
use crate::dataset::{load_dataset, load_from_registry, read_registry_meta, Dataset, DatasetError, DatasetMeta, Split};
use crate::detectors::{CanonicalOrderConfig, LocalOrderConfig, MinKConfig, TokenOverlapConfig, WpqConfig};
use crate::result::Method;
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub subject: BackendSpec,
    /// Produces perturbations and oracle solutions; defaults to the subject.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<BackendSpec>,
    /// Judges near-exact matches; defaults to the subject.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<BackendSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub split: Split,
    /// JSONL file. Relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Registry root holding `<name>/<split>.jsonl` and `<name>/meta.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<PathBuf>,
    /// Overrides the registry description used by the local order quiz.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl DatasetEntry {
    pub fn load(&self) -> Result<Dataset, DatasetError> {
        let mut ds = match (&self.path, &self.registry) {
            (Some(path), _) => {
                let description = path
                    .parent()
                    .map(read_registry_meta)
                    .transpose()?
                    .flatten()
                    .map(|(_, d)| d)
                    .unwrap_or_default();
                load_dataset(
                    path,
                    DatasetMeta {
                        name: self.name.clone(),
                        split: self.split,
                        description,
                    },
                )?
            }
            (None, Some(root)) => load_from_registry(root, &self.name, self.split)?,
            (None, None) => {
                return Err(DatasetError::InvalidArgument(format!(
                    "dataset `{}` needs a path or a registry",
                    self.name
                )))
            }
        };
        if let Some(d) = &self.description {
            ds.meta.description = d.clone();
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wpq: Option<WpqConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_order: Option<LocalOrderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_overlap: Option<TokenOverlapConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_k: Option<MinKConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical_order: Option<CanonicalOrderConfig>,
}

impl DetectorsConfig {
    pub fn enabled(&self) -> Vec<Method> {
        Method::ALL
            .into_iter()
            .filter(|m| match m {
                Method::Wpq => self.wpq.is_some(),
                Method::LocalOrder => self.local_order.is_some(),
                Method::TokenOverlap => self.token_overlap.is_some(),
                Method::MinK => self.min_k.is_some(),
                Method::CanonicalOrder => self.canonical_order.is_some(),
            })
            .collect()
    }

    pub fn params(&self, method: Method) -> serde_json::Value {
        let v = match method {
            Method::Wpq => serde_json::to_value(&self.wpq),
            Method::LocalOrder => serde_json::to_value(&self.local_order),
            Method::TokenOverlap => serde_json::to_value(&self.token_overlap),
            Method::MinK => serde_json::to_value(&self.min_k),
            Method::CanonicalOrder => serde_json::to_value(&self.canonical_order),
        };
        v.expect("detector config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub backends: BackendsConfig,
    pub datasets: Vec<DatasetEntry>,
    pub detectors: DetectorsConfig,
}

impl RunConfig {
    /// Parses and validates a config file, resolving relative paths against
    /// its directory. Dataset files are checked when each pair runs, so one
    /// missing file fails only its own pairs.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = std::path::absolute(path.parent().unwrap_or(Path::new(""))).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut cfg.datasets {
            d.path.as_mut().map(resolve);
            d.registry.as_mut().map(resolve);
        }
        cfg.output_dir.as_mut().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.datasets.is_empty() {
            return Err(ConfigError::Invalid("no datasets".into()));
        }
        if self.detectors.enabled().is_empty() {
            return Err(ConfigError::Invalid("no detectors enabled".into()));
        }
        if self.workers == Some(0) {
            return Err(ConfigError::Invalid("workers must be >= 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for d in &self.datasets {
            if d.path.is_none() && d.registry.is_none() {
                return Err(ConfigError::Invalid(format!(
                    "dataset `{}` needs a path or a registry",
                    d.name
                )));
            }
            if !seen.insert((d.name.as_str(), d.split)) {
                return Err(ConfigError::Invalid(format!(
                    "dataset `{}` split {} listed twice",
                    d.name, d.split
                )));
            }
        }
        let invalid = |e: crate::detectors::DetectorError| ConfigError::Invalid(e.to_string());
        if let Some(c) = &self.detectors.min_k {
            c.validate().map_err(invalid)?;
        }
        if let Some(c) = &self.detectors.canonical_order {
            c.validate().map_err(invalid)?;
        }
        if let Some(c) = &self.detectors.token_overlap {
            if c.resamples < crate::stats::MIN_RESAMPLES {
                return Err(ConfigError::Invalid(format!(
                    "token_overlap.resamples must be >= {}",
                    crate::stats::MIN_RESAMPLES
                )));
            }
        }
        Ok(())
    }

    pub fn generator(&self) -> &BackendSpec {
        self.backends.generator.as_ref().unwrap_or(&self.backends.subject)
    }

    pub fn judge(&self) -> &BackendSpec {
        self.backends.judge.as_ref().unwrap_or(&self.backends.subject)
    }
}

/// Seed for one (method, dataset, split) pair, independent of run order.
pub fn pair_seed(master: u64, method: Method, dataset: &str, split: Split) -> u64 {
    rng::derive_seed(
        master,
        &[
            rng::TAG_DETECTOR,
            rng::hash_str(method.as_str()),
            rng::hash_str(dataset),
            rng::hash_str(split.as_str()),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 7,
        "backends": {"subject": {"kind": "mock", "id": "m", "completion": {"mode": "fixed-choice", "letter": "A"}}},
        "datasets": [{"name": "toy", "split": "test", "path": "data/toy.jsonl"}],
        "detectors": {"local_order": {}, "min_k": {"k_percent": 10}}
    }"#;

    #[test]
    fn loads_and_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, MINIMAL).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        let expected = std::path::absolute(dir.path()).unwrap().join("data/toy.jsonl");
        assert_eq!(cfg.datasets[0].path.as_deref(), Some(expected.as_path()));
        assert_eq!(cfg.detectors.enabled(), vec![Method::LocalOrder, Method::MinK]);
        assert_eq!(cfg.detectors.min_k.as_ref().unwrap().k_percent, 10.0);
        assert_eq!(cfg.detectors.min_k.as_ref().unwrap().sample_size, 100);
        assert_eq!(cfg.generator(), &cfg.backends.subject);
    }

    #[test]
    fn rejects_bad_configs() {
        let no_seed = MINIMAL.replace("\"seed\": 7,", "");
        assert!(serde_json::from_str::<RunConfig>(&no_seed).is_err());
        let typo = MINIMAL.replace("\"min_k\"", "\"mink\"");
        assert!(serde_json::from_str::<RunConfig>(&typo).is_err());
        let mut cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        cfg.detectors = DetectorsConfig::default();
        assert!(cfg.validate().is_err());
        let mut cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        cfg.datasets.push(cfg.datasets[0].clone());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pair_seeds_differ() {
        let a = pair_seed(1, Method::MinK, "toy", Split::Test);
        assert_ne!(a, pair_seed(1, Method::MinK, "toy", Split::Train));
        assert_ne!(a, pair_seed(1, Method::Wpq, "toy", Split::Test));
        assert_ne!(a, pair_seed(2, Method::MinK, "toy", Split::Test));
        assert_eq!(a, pair_seed(1, Method::MinK, "toy", Split::Test));
    }
}
