//! The five contamination detectors.

pub mod canonical;
pub mod local_order;
pub mod min_k;
pub mod overlap;
pub mod wpq;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, GenerationParams, ModelBackend};
use crate::dataset::DatasetError;
use crate::stats::StatsError;

pub use canonical::{canonical_order_pvalue, CanonicalOrderConfig, CanonicalOrderResult, ShardLikelihoods};
pub use local_order::{run_local_order_quiz, LocalOrderConfig, LocalOrderReport};
pub use min_k::{min_k_from_logprobs, min_k_score, min_k_split_report, MinKConfig, MinKResult};
pub use overlap::{is_contaminated, run_token_overlap, OverlapReport, OverlapTrial, TokenOverlapConfig};
pub use wpq::{perturb_instance, run_wpq, run_wpq_detector, PerturbationQuizItem, WpqConfig, WpqReport};

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("instance `{id}`: {source}")]
    Instance {
        id: String,
        #[source]
        source: Box<DetectorError>,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl DetectorError {
    pub(crate) fn at(id: &str, source: impl Into<DetectorError>) -> Self {
        DetectorError::Instance {
            id: id.to_string(),
            source: Box::new(source.into()),
        }
    }

    /// True when the failure is a missing backend capability, which callers
    /// report as "unavailable" rather than as an error.
    pub fn is_capability(&self) -> bool {
        match self {
            DetectorError::Backend(BackendError::Capability { .. }) => true,
            DetectorError::Instance { source, .. } => source.is_capability(),
            _ => false,
        }
    }
}

/// One answered multiple-choice item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizRecord {
    pub instance_id: String,
    pub prompt: String,
    pub response: String,
    pub parsed: Option<char>,
    pub correct_letter: char,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizAccuracy {
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub items: Vec<QuizRecord>,
}

impl QuizAccuracy {
    pub fn from_records(items: Vec<QuizRecord>) -> Self {
        let n_correct = items.iter().filter(|r| r.correct).count();
        let n_items = items.len();
        Self {
            n_items,
            n_correct,
            accuracy: accuracy(n_correct, n_items),
            items,
        }
    }
}

pub(crate) fn accuracy(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

pub(crate) fn require_generation(backend: &dyn ModelBackend) -> Result<(), BackendError> {
    if backend.capabilities().can_generate() {
        Ok(())
    } else {
        Err(BackendError::Capability {
            backend: backend.model_id().to_string(),
            capability: "text generation",
        })
    }
}

pub(crate) fn require_scoring(backend: &dyn ModelBackend) -> Result<(), BackendError> {
    if backend.capabilities().supports_token_scoring {
        Ok(())
    } else {
        Err(BackendError::Capability {
            backend: backend.model_id().to_string(),
            capability: "token scoring",
        })
    }
}

pub(crate) fn generate(
    backend: &dyn ModelBackend,
    prompt: &str,
    params: &GenerationParams,
) -> Result<String, BackendError> {
    Ok(backend.complete(prompt, params)?.text)
}

/// Asks a multiple-choice question at temperature 0 and grades the answer.
pub(crate) fn ask_choice(
    backend: &dyn ModelBackend,
    instance_id: &str,
    prompt: String,
    allowed: &[char],
    correct_letter: char,
    max_tokens: u32,
) -> Result<QuizRecord, BackendError> {
    let response = generate(backend, &prompt, &GenerationParams::greedy(max_tokens))?;
    let parsed = crate::text_metrics::parse_choice(&response, allowed).letter;
    Ok(QuizRecord {
        instance_id: instance_id.to_string(),
        prompt,
        response,
        parsed,
        correct_letter,
        correct: parsed == Some(correct_letter),
    })
}
