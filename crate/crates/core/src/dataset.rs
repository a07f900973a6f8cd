//! Benchmark datasets in a canonical schema, plus the rendering, sharding,
//! splitting and sampling primitives shared by the detectors.
//!
//! A dataset file is JSONL with one object per instance:
//! `{"id", "question", "answer", "choices"?, "category"?, "split"?}`.
//! The registry layout is `<root>/<dataset>/<split>.jsonl` next to
//! `<root>/<dataset>/meta.json` (`{"name", "description"}`).

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
    Unsplit,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Validation => "validation",
            Split::Unsplit => "unsplit",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "validation" | "val" | "dev" => Ok(Split::Validation),
            "unsplit" | "-" | "" => Ok(Split::Unsplit),
            other => Err(DatasetError::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInstance {
    pub id: String,
    /// Position in the original dataset order.
    pub index: usize,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub split: Split,
}

/// Name, split and public description of a dataset. `name` and `split` are
/// substituted into prompts verbatim; `description` is never paraphrased.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub split: Split,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub instances: Vec<DatasetInstance>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate id `{id}`")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("{0} contains no instances")]
    Empty(PathBuf),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cannot render instance `{id}`: {reason}")]
    Render { id: String, reason: String },
    #[error("text has fewer than two words and cannot be split")]
    Unsplittable,
    #[error("{}", sampling_message(.category, .message))]
    Sampling {
        category: Option<String>,
        message: String,
    },
}

fn sampling_message(category: &Option<String>, message: &str) -> String {
    match category {
        Some(c) => format!("sampling failed in category `{c}`: {message}"),
        None => format!("sampling failed: {message}"),
    }
}

#[derive(Deserialize)]
struct RawInstance {
    id: serde_json::Value,
    question: String,
    answer: serde_json::Value,
    #[serde(default)]
    choices: Option<Vec<String>>,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    split: Option<Split>,
}

fn scalar_to_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Builds a dataset from instances, reassigning indices by position.
    pub fn from_instances(meta: DatasetMeta, mut instances: Vec<DatasetInstance>) -> Self {
        for (i, inst) in instances.iter_mut().enumerate() {
            inst.index = i;
        }
        Self { meta, instances }
    }

    /// Instances at the given positions, in the order given.
    pub fn pick(&self, positions: &[usize]) -> Vec<&DatasetInstance> {
        positions.iter().map(|&p| &self.instances[p]).collect()
    }
}

/// Loads a JSONL dataset file; indices follow file order.
pub fn load_dataset(path: impl AsRef<Path>, meta: DatasetMeta) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut instances = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DatasetError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let raw: RawInstance = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let id = scalar_to_string(&raw.id)
            .ok_or_else(|| parse_err("`id` must be a string or number".into()))?;
        let answer = scalar_to_string(&raw.answer)
            .ok_or_else(|| parse_err("`answer` must be a string or number".into()))?;
        if raw.question.trim().is_empty() {
            return Err(parse_err("`question` is empty".into()));
        }
        if answer.trim().is_empty() {
            return Err(parse_err("`answer` is empty".into()));
        }
        if let Some(s) = raw.split {
            if s != meta.split {
                return Err(parse_err(format!(
                    "instance split `{s}` does not match dataset split `{}`",
                    meta.split
                )));
            }
        }
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId {
                path: path.to_path_buf(),
                line: lineno,
                id,
            });
        }
        instances.push(DatasetInstance {
            id,
            index: instances.len(),
            question: raw.question,
            answer,
            choices: raw.choices,
            category: raw.category,
            split: meta.split,
        });
    }
    if instances.is_empty() {
        return Err(DatasetError::Empty(path.to_path_buf()));
    }
    log::debug!("loaded {} instances from {}", instances.len(), path.display());
    Ok(Dataset { meta, instances })
}

#[derive(Deserialize)]
struct RegistryMeta {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    description: String,
}

/// Reads `<dir>/meta.json` if present.
pub fn read_registry_meta(dir: &Path) -> Result<Option<(Option<String>, String)>, DatasetError> {
    let path = dir.join("meta.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|source| DatasetError::Io {
        path: path.clone(),
        source,
    })?;
    let m: RegistryMeta = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path,
        line: 1,
        message: e.to_string(),
    })?;
    Ok(Some((m.name, m.description)))
}

/// Loads `<root>/<name>/<split>.jsonl` with its `meta.json`.
pub fn load_from_registry(root: &Path, name: &str, split: Split) -> Result<Dataset, DatasetError> {
    let dir = root.join(name);
    let description = read_registry_meta(&dir)?.map(|(_, d)| d).unwrap_or_default();
    let meta = DatasetMeta {
        name: name.to_string(),
        split,
        description,
    };
    load_dataset(dir.join(format!("{split}.jsonl")), meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    /// Question and answer joined by a single newline.
    #[default]
    QaConcat,
    QuestionOnly,
    /// Question with its embedded answer-choice block removed.
    QuestionNoChoices,
}

pub fn render_instance(instance: &DatasetInstance, mode: RenderMode) -> Result<String, DatasetError> {
    match mode {
        RenderMode::QaConcat => Ok(format!("{}\n{}", instance.question, instance.answer)),
        RenderMode::QuestionOnly => Ok(instance.question.clone()),
        RenderMode::QuestionNoChoices => {
            let choices = instance
                .choices
                .as_ref()
                .filter(|c| !c.is_empty())
                .ok_or_else(|| DatasetError::Render {
                    id: instance.id.clone(),
                    reason: "question-no-choices needs choices".into(),
                })?;
            Ok(strip_choice_block(&instance.question, choices))
        }
    }
}

/// Drops lines that list one of `choices` (optionally behind a label such as
/// "A.", "(B)", "c)" or "1:") together with a bare "Choices:"/"Options:" header.
fn strip_choice_block(question: &str, choices: &[String]) -> String {
    let is_choice_line = |line: &str| {
        let t = line.trim();
        let unlabeled = strip_label(t);
        choices.iter().any(|c| {
            let c = c.trim();
            !c.is_empty() && (unlabeled == c || t == c)
        })
    };
    let is_header = |line: &str| {
        matches!(
            line.trim().to_ascii_lowercase().as_str(),
            "choices:" | "options:" | "answer choices:" | "choices" | "options"
        )
    };
    let kept: Vec<&str> = question
        .lines()
        .filter(|l| !is_choice_line(l) && !is_header(l))
        .collect();
    kept.join("\n").trim_end().to_string()
}

fn strip_label(line: &str) -> &str {
    let bytes = line.as_bytes();
    let mut i = 0;
    if bytes.first() == Some(&b'(') {
        i += 1;
    }
    if i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
        let j = i + 1;
        if j < bytes.len() && matches!(bytes[j], b')' | b'.' | b':') {
            return line[j + 1..].trim_start();
        }
    }
    line
}

/// Contiguous, balanced partition preserving order: sizes differ by at most
/// one and the first `len % num_shards` shards are the larger ones.
pub fn shard<T: Clone>(items: &[T], num_shards: usize) -> Result<Vec<Vec<T>>, DatasetError> {
    if num_shards == 0 {
        return Err(DatasetError::InvalidArgument("num_shards must be positive".into()));
    }
    if items.len() < num_shards {
        return Err(DatasetError::InvalidArgument(format!(
            "cannot cut {} instances into {num_shards} shards",
            items.len()
        )));
    }
    let base = items.len() / num_shards;
    let extra = items.len() % num_shards;
    let mut out = Vec::with_capacity(num_shards);
    let mut start = 0;
    for s in 0..num_shards {
        let size = base + usize::from(s < extra);
        out.push(items[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

/// Positions of `n` instances drawn uniformly without replacement from
/// `0..len`, returned in ascending (original) order.
pub fn sample_positions(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let n = n.min(len);
    let mut rng = rng::stream(seed, &[rng::TAG_SAMPLE]);
    let mut picked = index::sample(&mut rng, len, n).into_vec();
    picked.sort_unstable();
    picked
}

/// Splits whitespace-normalized `text` at a word boundary whose word-count
/// fraction is drawn uniformly from `bounds`. Returns `(prefix, suffix)`,
/// each non-empty; `prefix + " " + suffix` is the normalized text.
pub fn split_at_random_point(text: &str, seed: u64, bounds: (f64, f64)) -> Result<(String, String), DatasetError> {
    let (lo, hi) = bounds;
    if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
        return Err(DatasetError::InvalidArgument(format!(
            "split bounds must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]"
        )));
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() < 2 {
        return Err(DatasetError::Unsplittable);
    }
    let mut rng = rng::stream(seed, &[rng::TAG_SPLIT]);
    let frac = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let at = ((frac * words.len() as f64).round() as usize).clamp(1, words.len() - 1);
    Ok((words[..at].join(" "), words[at..].join(" ")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalOrderQuizItem {
    pub target: DatasetInstance,
    pub options: Vec<DatasetInstance>,
    /// Position of the target's successor within `options`.
    pub correct_position: usize,
}

/// Draws a quiz item around a uniformly chosen target that has a successor.
pub fn sample_order_quiz(
    dataset: &Dataset,
    seed: u64,
    n_options: usize,
    same_category: bool,
) -> Result<LocalOrderQuizItem, DatasetError> {
    if dataset.len() < n_options + 1 {
        return Err(DatasetError::Sampling {
            category: None,
            message: format!(
                "{} instances cannot supply a target plus {n_options} options",
                dataset.len()
            ),
        });
    }
    let mut rng = rng::stream(seed, &[rng::TAG_QUIZ_ITEM]);
    let target = rng.random_range(0..dataset.len() - 1);
    order_quiz_with_rng(dataset, target, &mut rng, n_options, same_category)
}

/// Quiz item for the instance at position `target`; distractors and the
/// correct position come from a stream keyed by the target's index.
pub fn order_quiz_for_target(
    dataset: &Dataset,
    target: usize,
    seed: u64,
    n_options: usize,
    same_category: bool,
) -> Result<LocalOrderQuizItem, DatasetError> {
    let index = dataset.instances.get(target).map(|t| t.index as u64).unwrap_or(0);
    let mut rng = rng::stream(seed, &[rng::TAG_QUIZ_ITEM, index]);
    order_quiz_with_rng(dataset, target, &mut rng, n_options, same_category)
}

fn order_quiz_with_rng(
    dataset: &Dataset,
    target: usize,
    rng: &mut StreamRng,
    n_options: usize,
    same_category: bool,
) -> Result<LocalOrderQuizItem, DatasetError> {
    if n_options < 2 {
        return Err(DatasetError::InvalidArgument("n_options must be >= 2".into()));
    }
    if target + 1 >= dataset.len() {
        return Err(DatasetError::Sampling {
            category: None,
            message: format!("target at position {target} has no successor"),
        });
    }
    let t = &dataset.instances[target];
    let eligible: Vec<usize> = (0..dataset.len())
        .filter(|&p| p != target && p != target + 1)
        .filter(|&p| !same_category || dataset.instances[p].category == t.category)
        .collect();
    let needed = n_options - 1;
    if eligible.len() < needed {
        return Err(DatasetError::Sampling {
            category: if same_category { t.category.clone() } else { None },
            message: format!(
                "need {needed} distractors for target `{}`, only {} eligible",
                t.id,
                eligible.len()
            ),
        });
    }
    let mut options: Vec<DatasetInstance> = index::sample(rng, eligible.len(), needed)
        .into_iter()
        .map(|i| dataset.instances[eligible[i]].clone())
        .collect();
    let correct_position = rng.random_range(0..n_options);
    options.insert(correct_position, dataset.instances[target + 1].clone());
    Ok(LocalOrderQuizItem {
        target: t.clone(),
        options,
        correct_position,
    })
}
