//! Local order quiz: given a target instance, which option came right after
//! it in the published dataset order?

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ask_choice, require_generation, DetectorError, QuizAccuracy};
use crate::backend::ModelBackend;
use crate::dataset::{order_quiz_for_target, render_instance, sample_positions, Dataset, DatasetError, RenderMode};
use crate::prompts;
use crate::text_metrics::option_letters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalOrderConfig {
    pub sample_size: usize,
    pub n_options: usize,
    /// Draw distractors from the target's category only.
    pub same_category: bool,
    pub render: RenderMode,
    pub max_tokens: u32,
}

impl Default for LocalOrderConfig {
    fn default() -> Self {
        Self {
            sample_size: 100,
            n_options: 4,
            same_category: false,
            render: RenderMode::QuestionOnly,
            max_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub instance_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalOrderReport {
    pub quiz: QuizAccuracy,
    pub skipped: Vec<SkippedItem>,
}

pub fn run_local_order_quiz(
    subject: &dyn ModelBackend,
    dataset: &Dataset,
    config: &LocalOrderConfig,
    seed: u64,
) -> Result<LocalOrderReport, DetectorError> {
    require_generation(subject)?;
    if !(2..=26).contains(&config.n_options) {
        return Err(DetectorError::InvalidConfig(format!(
            "n_options must lie in [2, 26], got {}",
            config.n_options
        )));
    }
    if dataset.len() < 2 {
        return Err(DetectorError::Degenerate("a dataset of fewer than two instances has no successors".into()));
    }
    // Targets are distinct positions that have a successor.
    let targets = sample_positions(dataset.len() - 1, config.sample_size, seed);
    let letters = option_letters(config.n_options);
    let outcomes = targets
        .par_iter()
        .map(|&t| {
            let id = &dataset.instances[t].id;
            let item = match order_quiz_for_target(dataset, t, seed, config.n_options, config.same_category) {
                Ok(item) => item,
                Err(e @ DatasetError::Sampling { .. }) => {
                    log::warn!("local order: skipping `{id}`: {e}");
                    return Ok(Err(SkippedItem {
                        instance_id: id.clone(),
                        reason: e.to_string(),
                    }));
                }
                Err(e) => return Err(DetectorError::at(id, e)),
            };
            let run = || -> Result<_, DetectorError> {
                let target = render_instance(&item.target, config.render)?;
                let options = item
                    .options
                    .iter()
                    .map(|o| render_instance(o, config.render))
                    .collect::<Result<Vec<_>, _>>()?;
                let prompt = prompts::local_order_prompt(&dataset.meta, &target, &options);
                Ok(ask_choice(
                    subject,
                    id,
                    prompt,
                    &letters,
                    letters[item.correct_position],
                    config.max_tokens,
                )?)
            };
            run().map(Ok).map_err(|e| DetectorError::at(id, e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(s) => skipped.push(s),
        }
    }
    Ok(LocalOrderReport {
        quiz: QuizAccuracy::from_records(records),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendCapabilities, BackendError, Completion, FinishReason, GenerationParams, TokenLogProb};
    use crate::backend::{CompletionMode, MockBackend, MockScript};
    use crate::dataset::{DatasetInstance, DatasetMeta, Split};

    fn dataset(n: usize, categories: usize) -> Dataset {
        let instances = (0..n)
            .map(|i| DatasetInstance {
                id: format!("o{i}"),
                index: i,
                question: format!("Statement {i}: the lamp{} glows", i * 31 % 97),
                answer: "true".into(),
                choices: None,
                category: Some(format!("c{}", i % categories.max(1))),
                split: Split::Test,
            })
            .collect();
        Dataset::from_instances(
            DatasetMeta {
                name: "Toy".into(),
                split: Split::Validation,
                description: "A toy corpus of statements.".into(),
            },
            instances,
        )
    }

    /// Knows the dataset order and always names the successor.
    struct Oracle(Dataset);

    impl ModelBackend for Oracle {
        fn model_id(&self) -> &str {
            "oracle"
        }
        fn capabilities(&self) -> BackendCapabilities {
            BackendCapabilities {
                supports_completion: true,
                supports_chat: false,
                supports_token_scoring: false,
            }
        }
        fn complete(&self, prompt: &str, _: &GenerationParams) -> Result<Completion, BackendError> {
            let target = prompt.split("Target example: ").nth(1).unwrap().lines().next().unwrap();
            let pos = self.0.instances.iter().position(|i| i.question == target).unwrap();
            let next = &self.0.instances[pos + 1].question;
            let line = prompt.lines().find(|l| l.ends_with(next.as_str()) && l.starts_with('(')).unwrap();
            Ok(Completion {
                text: format!("The answer is {}", &line[..3]),
                finish_reason: FinishReason::Stop,
            })
        }
        fn score_tokens(&self, _: &str) -> Result<Vec<TokenLogProb>, BackendError> {
            unreachable!()
        }
    }

    #[test]
    fn oracle_subject_scores_one() {
        let ds = dataset(60, 1);
        let r = run_local_order_quiz(&Oracle(ds.clone()), &ds, &LocalOrderConfig::default(), 2).unwrap();
        assert_eq!(r.quiz.n_items, 59);
        assert_eq!(r.quiz.accuracy, 1.0);
        let p = &r.quiz.items[0].prompt;
        assert!(p.starts_with("A toy corpus of statements.\n\nGiven the target data example in the validation of the Toy dataset"));
    }

    #[test]
    fn uniform_subject_is_near_chance() {
        let ds = dataset(1001, 1);
        let subject = MockBackend::new(
            MockScript::new("u")
                .with_seed(5)
                .with_completion(CompletionMode::SeededUniformChoice { letters: None }),
        );
        let cfg = LocalOrderConfig {
            sample_size: 1000,
            ..Default::default()
        };
        let r = run_local_order_quiz(&subject, &ds, &cfg, 9).unwrap();
        assert_eq!(r.quiz.n_items, 1000);
        assert!((r.quiz.accuracy - 0.25).abs() <= 0.04, "{}", r.quiz.accuracy);
    }

    #[test]
    fn sampling_errors_are_skipped() {
        // Six categories over 12 instances: each category has two members,
        // too few for three same-category distractors.
        let ds = dataset(12, 6);
        let subject = MockBackend::new(MockScript::new("a").with_completion(CompletionMode::FixedChoice { letter: 'A' }));
        let cfg = LocalOrderConfig {
            same_category: true,
            ..Default::default()
        };
        let r = run_local_order_quiz(&subject, &ds, &cfg, 1).unwrap();
        assert_eq!(r.quiz.n_items, 0);
        assert_eq!(r.skipped.len(), 11);
    }
}
