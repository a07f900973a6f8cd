//! Token completion overlap: guided (dataset + split named) versus general
//! completions of an instance prefix, scored against the held-out suffix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate, require_generation, DetectorError};
use crate::backend::{GenerationParams, ModelBackend};
use crate::dataset::{render_instance, sample_positions, split_at_random_point, Dataset, RenderMode};
use crate::prompts;
use crate::rng;
use crate::stats::{bootstrap_pvalue, PValue, DEFAULT_RESAMPLES};
use crate::text_metrics::{normalized_equal, parse_yes_no, rouge_l, RougeLScore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenOverlapConfig {
    pub sample_size: usize,
    pub resamples: usize,
    /// Range of the word fraction kept as the prompt prefix.
    pub split_bounds: (f64, f64),
    pub max_tokens: u32,
    pub render: RenderMode,
}

impl Default for TokenOverlapConfig {
    fn default() -> Self {
        Self {
            sample_size: 10,
            resamples: DEFAULT_RESAMPLES,
            split_bounds: (0.4, 0.6),
            max_tokens: 256,
            render: RenderMode::QaConcat,
        }
    }
}

/// Outcome of asking the judge about one guided completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeVerdict {
    Yes,
    No,
    /// Unparseable twice.
    Failed,
    /// Not asked: the completion already matches exactly.
    NotAsked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapTrial {
    pub instance_id: String,
    pub prefix: String,
    pub reference_suffix: String,
    pub guided_prompt: String,
    pub general_prompt: String,
    pub guided_completion: String,
    pub general_completion: String,
    pub guided_rouge: RougeLScore,
    pub general_rouge: RougeLScore,
    pub exact: bool,
    pub near: bool,
    pub judge_verdict: JudgeVerdict,
    pub judge_responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub trials: Vec<OverlapTrial>,
    pub exact_count: usize,
    pub near_count: usize,
    pub judge_failures: usize,
    pub p_value: PValue,
    pub contaminated: bool,
}

/// One exact match or two near matches flag the split.
pub fn is_contaminated(exact_count: usize, near_count: usize) -> bool {
    exact_count >= 1 || near_count >= 2
}

fn judge(
    judge_backend: &dyn ModelBackend,
    reference: &str,
    candidate: &str,
) -> Result<(JudgeVerdict, Vec<String>), DetectorError> {
    let prompt = prompts::judge_prompt(reference, candidate);
    let mut responses = Vec::new();
    for _ in 0..2 {
        let r = generate(judge_backend, &prompt, &GenerationParams::greedy(16))?;
        let verdict = parse_yes_no(&r);
        responses.push(r);
        match verdict {
            Some(true) => return Ok((JudgeVerdict::Yes, responses)),
            Some(false) => return Ok((JudgeVerdict::No, responses)),
            None => {}
        }
    }
    Ok((JudgeVerdict::Failed, responses))
}

fn run_trial(
    subject: &dyn ModelBackend,
    judge_backend: &dyn ModelBackend,
    dataset: &Dataset,
    position: usize,
    config: &TokenOverlapConfig,
    seed: u64,
) -> Result<OverlapTrial, DetectorError> {
    let inst = &dataset.instances[position];
    let text = render_instance(inst, config.render)?;
    let split_seed = rng::derive_seed(seed, &[rng::TAG_DETECTOR, inst.index as u64]);
    let (prefix, reference_suffix) = split_at_random_point(&text, split_seed, config.split_bounds)?;
    let params = GenerationParams::greedy(config.max_tokens);
    let guided_prompt = prompts::overlap_guided_prompt(&dataset.meta, &prefix);
    let general_prompt = prompts::overlap_general_prompt(&prefix);
    let guided_completion = generate(subject, &guided_prompt, &params)?;
    let general_completion = generate(subject, &general_prompt, &params)?;
    let exact = normalized_equal(&guided_completion, &reference_suffix);
    let (judge_verdict, judge_responses) = if exact {
        (JudgeVerdict::NotAsked, Vec::new())
    } else {
        judge(judge_backend, &reference_suffix, guided_completion.trim())?
    };
    Ok(OverlapTrial {
        instance_id: inst.id.clone(),
        guided_rouge: rouge_l(&guided_completion, &reference_suffix),
        general_rouge: rouge_l(&general_completion, &reference_suffix),
        prefix,
        reference_suffix,
        guided_prompt,
        general_prompt,
        guided_completion,
        general_completion,
        exact,
        near: judge_verdict == JudgeVerdict::Yes,
        judge_verdict,
        judge_responses,
    })
}

impl OverlapReport {
    /// Aggregates trials; the p-value compares guided against general F1.
    pub fn from_trials(trials: Vec<OverlapTrial>, resamples: usize, seed: u64) -> Result<Self, DetectorError> {
        let guided: Vec<f64> = trials.iter().map(|t| t.guided_rouge.f1).collect();
        let general: Vec<f64> = trials.iter().map(|t| t.general_rouge.f1).collect();
        let p_value = bootstrap_pvalue(&guided, &general, resamples, rng::derive_seed(seed, &[rng::TAG_BOOTSTRAP]))?;
        let exact_count = trials.iter().filter(|t| t.exact).count();
        let near_count = trials.iter().filter(|t| t.near).count();
        let judge_failures = trials
            .iter()
            .filter(|t| t.judge_verdict == JudgeVerdict::Failed)
            .count();
        Ok(Self {
            exact_count,
            near_count,
            judge_failures,
            p_value,
            contaminated: is_contaminated(exact_count, near_count),
            trials,
        })
    }
}

pub fn run_token_overlap(
    subject: &dyn ModelBackend,
    judge_backend: &dyn ModelBackend,
    dataset: &Dataset,
    config: &TokenOverlapConfig,
    seed: u64,
) -> Result<OverlapReport, DetectorError> {
    require_generation(subject)?;
    require_generation(judge_backend)?;
    if config.sample_size < 2 {
        return Err(DetectorError::InvalidConfig("sample_size must be >= 2".into()));
    }
    if dataset.len() < config.sample_size {
        return Err(DetectorError::Degenerate(format!(
            "dataset has {} instances, {} needed",
            dataset.len(),
            config.sample_size
        )));
    }
    let positions = sample_positions(dataset.len(), config.sample_size, seed);
    let trials = positions
        .par_iter()
        .map(|&p| {
            run_trial(subject, judge_backend, dataset, p, config, seed)
                .map_err(|e| DetectorError::at(&dataset.instances[p].id, e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    OverlapReport::from_trials(trials, config.resamples, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CompletionMode, MockBackend, MockScript};
    use crate::dataset::{DatasetInstance, DatasetMeta, Split};

    fn dataset() -> Dataset {
        let instances = (0..12)
            .map(|i| DatasetInstance {
                id: format!("s{i}"),
                index: i,
                question: format!("Sample {i} describes how farmer{i} planted {} rows of beans near the river", i + 3),
                answer: format!("The total is {}", i * 4),
                choices: None,
                category: None,
                split: Split::Train,
            })
            .collect();
        Dataset::from_instances(
            DatasetMeta {
                name: "Toy".into(),
                split: Split::Train,
                description: String::new(),
            },
            instances,
        )
    }

    fn text(id: &str, t: &str) -> MockBackend {
        MockBackend::new(MockScript::new(id).with_completion(CompletionMode::FixedText { text: t.into() }))
    }

    fn config() -> TokenOverlapConfig {
        TokenOverlapConfig {
            resamples: 2000,
            ..Default::default()
        }
    }

    #[test]
    fn threshold_boundaries() {
        assert!(!is_contaminated(0, 0));
        assert!(!is_contaminated(0, 1));
        assert!(is_contaminated(0, 2));
        assert!(is_contaminated(1, 0));
    }

    #[test]
    fn echo_subject_is_flagged() {
        let ds = dataset();
        let corpus = ds.instances.iter().map(|i| render_instance(i, RenderMode::QaConcat).unwrap()).collect();
        let subject = MockBackend::new(MockScript::new("echo").with_completion(CompletionMode::EchoSuffix {
            corpus,
            trigger: Some("split of the".into()),
            fallback: "lorem ipsum dolor".into(),
        }));
        let r = run_token_overlap(&subject, &text("judge", "Yes (near-exact match)"), &ds, &config(), 5).unwrap();
        assert_eq!((r.exact_count, r.near_count), (10, 0));
        assert!(r.contaminated);
        assert_eq!(r.p_value.value, 1.0 / 2001.0);
        assert!(r.trials.iter().all(|t| t.guided_rouge.f1 == 1.0 && t.general_rouge.f1 == 0.0));
    }

    #[test]
    fn unrelated_subject_is_clean() {
        let ds = dataset();
        let r = run_token_overlap(&text("lorem", "lorem ipsum dolor sit amet"), &text("judge", "No"), &ds, &config(), 5).unwrap();
        assert_eq!((r.exact_count, r.near_count), (0, 0));
        assert!(!r.contaminated);
        assert!(r.p_value.value >= 0.5);
    }

    #[test]
    fn judge_failure_is_excluded_after_one_retry() {
        let ds = dataset();
        let r = run_token_overlap(&text("lorem", "lorem"), &text("judge", "Maybe"), &ds, &config(), 5).unwrap();
        assert_eq!(r.judge_failures, 10);
        assert_eq!(r.near_count, 0);
        assert!(r.trials.iter().all(|t| t.judge_responses.len() == 2));

        let r = run_token_overlap(&text("lorem", "lorem"), &text("judge", "Yes"), &ds, &config(), 5).unwrap();
        assert_eq!(r.near_count, 10);
        assert!(r.contaminated);
    }

    #[test]
    fn prompts_are_persisted_and_deterministic() {
        let ds = dataset();
        let a = run_token_overlap(&text("l", "x"), &text("j", "No"), &ds, &config(), 8).unwrap();
        let b = run_token_overlap(&text("l", "x"), &text("j", "No"), &ds, &config(), 8).unwrap();
        assert_eq!(a, b);
        for t in &a.trials {
            assert!(t.guided_prompt.contains(&t.prefix));
            assert!(t.guided_prompt.contains("train split of the Toy dataset"));
            assert!(!t.prefix.is_empty() && !t.reference_suffix.is_empty());
        }
    }
}
