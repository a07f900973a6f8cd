//! Min-K% Prob: mean negative log-likelihood of the k% least likely tokens.
//!
//! Scores are positive NLL magnitudes, so larger means less probable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{require_scoring, DetectorError};
use crate::backend::ModelBackend;
use crate::dataset::{render_instance, sample_positions, Dataset, RenderMode};
use crate::stats::{summarize, SummaryStat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinKConfig {
    pub k_percent: f64,
    pub sample_size: usize,
    pub render: RenderMode,
}

impl Default for MinKConfig {
    fn default() -> Self {
        Self {
            k_percent: 20.0,
            sample_size: 100,
            render: RenderMode::QaConcat,
        }
    }
}

impl MinKConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(DetectorError::InvalidConfig(format!(
                "k_percent must lie in (0, 100], got {}",
                self.k_percent
            )));
        }
        if self.sample_size == 0 {
            return Err(DetectorError::InvalidConfig("sample_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub index: usize,
    pub score: f64,
    /// Tokens that carried a logprob.
    pub scored_tokens: usize,
    pub selected_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinKResult {
    pub per_instance: Vec<InstanceScore>,
    pub summary: SummaryStat,
}

/// Number of tokens selected from `count`: `max(1, floor(k/100 * count))`.
pub fn selected_count(k_percent: f64, count: usize) -> usize {
    ((k_percent * count as f64 / 100.0).floor() as usize).clamp(1, count.max(1))
}

/// Mean of `-logprob` over the lowest `selected_count` logprobs.
pub fn min_k_from_logprobs(logprobs: &[f64], k_percent: f64) -> Result<f64, DetectorError> {
    if logprobs.is_empty() {
        return Err(DetectorError::Degenerate("no scorable tokens".into()));
    }
    if logprobs.iter().any(|v| !v.is_finite()) {
        return Err(DetectorError::Degenerate("non-finite token logprob".into()));
    }
    let mut sorted = logprobs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let e = selected_count(k_percent, sorted.len());
    Ok(sorted[..e].iter().map(|lp| -lp).sum::<f64>() / e as f64)
}

fn score_text(backend: &dyn ModelBackend, text: &str, k_percent: f64) -> Result<(f64, usize), DetectorError> {
    let lps: Vec<f64> = backend
        .score_tokens(text)?
        .into_iter()
        .filter_map(|t| t.logprob)
        .collect();
    Ok((min_k_from_logprobs(&lps, k_percent)?, lps.len()))
}

pub fn min_k_score(backend: &dyn ModelBackend, text: &str, k_percent: f64) -> Result<f64, DetectorError> {
    require_scoring(backend)?;
    Ok(score_text(backend, text, k_percent)?.0)
}

/// Scores `sample_size` seeded instances. Any failure aborts the report.
pub fn min_k_split_report(
    backend: &dyn ModelBackend,
    dataset: &Dataset,
    config: &MinKConfig,
    seed: u64,
) -> Result<MinKResult, DetectorError> {
    config.validate()?;
    require_scoring(backend)?;
    if dataset.is_empty() {
        return Err(DetectorError::Degenerate("dataset is empty".into()));
    }
    let positions = sample_positions(dataset.len(), config.sample_size, seed);
    let per_instance = positions
        .par_iter()
        .map(|&p| {
            let inst = &dataset.instances[p];
            let run = || -> Result<InstanceScore, DetectorError> {
                let text = render_instance(inst, config.render)?;
                let (score, scored_tokens) = score_text(backend, &text, config.k_percent)?;
                Ok(InstanceScore {
                    id: inst.id.clone(),
                    index: inst.index,
                    score,
                    scored_tokens,
                    selected_tokens: selected_count(config.k_percent, scored_tokens),
                })
            };
            run().map_err(|e| DetectorError::at(&inst.id, e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let scores: Vec<f64> = per_instance.iter().map(|s| s.score).collect();
    Ok(MinKResult {
        summary: summarize(&scores)?,
        per_instance,
    })
}
