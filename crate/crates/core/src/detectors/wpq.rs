//! Word perturbation quiz: can the model pick the verbatim instance out of
//! three word-level paraphrases (plus a "none of these" option)?

use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{accuracy, ask_choice, generate, require_generation, DetectorError, QuizAccuracy};
use crate::backend::{GenerationParams, ModelBackend};
use crate::dataset::{render_instance, sample_positions, Dataset, DatasetInstance, DatasetMeta, RenderMode};
use crate::prompts::{self, one_line};
use crate::rng;
use crate::text_metrics::option_letters;

pub const DISTRACTORS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WpqConfig {
    pub sample_size: usize,
    /// Instance rendering. Unset: question without its choice block when the
    /// instance has choices, otherwise the bare question.
    pub render: Option<RenderMode>,
    pub temperature: f64,
    pub top_p: f64,
    pub generator_max_tokens: u32,
    pub quiz_max_tokens: u32,
}

impl Default for WpqConfig {
    fn default() -> Self {
        Self {
            sample_size: 100,
            render: None,
            temperature: 0.9,
            top_p: 0.9,
            generator_max_tokens: 1024,
            quiz_max_tokens: 256,
        }
    }
}

impl WpqConfig {
    pub fn render_mode(&self, instance: &DatasetInstance) -> RenderMode {
        self.render.unwrap_or(match &instance.choices {
            Some(c) if !c.is_empty() => RenderMode::QuestionNoChoices,
            _ => RenderMode::QuestionOnly,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedOption {
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationQuizItem {
    pub instance_id: String,
    pub original: String,
    pub perturbed: Vec<String>,
    /// (A)..(D); the original sits at `correct_position`.
    pub options: Vec<String>,
    pub correct_position: usize,
    pub rejected: Vec<RejectedOption>,
    pub generator_responses: Vec<String>,
}

impl PerturbationQuizItem {
    pub fn correct_letter(&self) -> char {
        (b'A' + self.correct_position as u8) as char
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationFailure {
    pub instance_id: String,
    pub valid_options: usize,
    pub rejected: Vec<RejectedOption>,
    pub generator_responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum PerturbOutcome {
    Item(PerturbationQuizItem),
    Failed(PerturbationFailure),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WpqReport {
    /// Accuracy over items whose perturbation succeeded.
    pub quiz: QuizAccuracy,
    /// Accuracy counting perturbation failures as incorrect.
    pub raw_accuracy: f64,
    pub failures: Vec<PerturbationFailure>,
    pub quiz_items: Vec<PerturbationQuizItem>,
}

fn option_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?mi)^[ \t]*\**option[ \t]*(\d+)\**[ \t]*[-–—:.)]").expect("static regex"))
}

fn digit_run() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+").expect("static regex"))
}

/// Bodies of the "Option k -" blocks, in order of appearance.
pub fn parse_options(response: &str) -> Vec<String> {
    let heads: Vec<(usize, usize)> = option_header()
        .find_iter(response)
        .map(|m| (m.start(), m.end()))
        .collect();
    heads
        .iter()
        .enumerate()
        .map(|(i, &(_, body_start))| {
            let end = heads.get(i + 1).map_or(response.len(), |h| h.0);
            response[body_start..end].trim().to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn digit_multiset(text: &str) -> Vec<String> {
    let mut v: Vec<String> = digit_run().find_iter(text).map(|m| m.as_str().to_string()).collect();
    v.sort();
    v
}

/// Capitalized words that do not open a sentence or a line.
pub fn capitalized_multiset(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut sentence_start = true;
        for raw in line.split_whitespace() {
            let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if !sentence_start && word.chars().next().is_some_and(char::is_uppercase) {
                out.push(word.to_string());
            }
            sentence_start = raw.trim_end_matches(['"', '\'', ')']).ends_with(['.', '!', '?']);
        }
    }
    out.sort();
    out
}

/// Why `candidate` is not an acceptable distractor, if it is not.
pub fn rejection_reason(original: &str, candidate: &str, accepted: &[String]) -> Option<String> {
    let flat = one_line(candidate);
    if flat.is_empty() {
        return Some("empty option".into());
    }
    if flat == one_line(original) {
        return Some("identical to the original".into());
    }
    if accepted.iter().any(|a| one_line(a) == flat) {
        return Some("duplicate of another option".into());
    }
    if digit_multiset(candidate) != digit_multiset(original) {
        return Some("numbers changed".into());
    }
    if capitalized_multiset(candidate) != capitalized_multiset(original) {
        return Some("proper nouns changed".into());
    }
    None
}

/// Asks the generator for four perturbed variants of `original` and keeps
/// the first three that pass validation, regenerating once if needed.
pub fn perturb_instance(
    generator: &dyn ModelBackend,
    instance_id: &str,
    original: &str,
    config: &WpqConfig,
    seed: u64,
) -> Result<PerturbOutcome, DetectorError> {
    require_generation(generator)?;
    let params = GenerationParams::sampling(config.temperature, config.top_p, config.generator_max_tokens);
    let prompt = prompts::perturbation_prompt(original);
    let mut accepted: Vec<String> = Vec::new();
    let mut rejected = Vec::new();
    let mut generator_responses = Vec::new();
    for _ in 0..2 {
        let response = generate(generator, &prompt, &params)?;
        for option in parse_options(&response) {
            if accepted.len() == DISTRACTORS {
                break;
            }
            match rejection_reason(original, &option, &accepted) {
                None => accepted.push(option),
                Some(reason) => rejected.push(RejectedOption { text: option, reason }),
            }
        }
        generator_responses.push(response);
        if accepted.len() == DISTRACTORS {
            break;
        }
    }
    if accepted.len() < DISTRACTORS {
        return Ok(PerturbOutcome::Failed(PerturbationFailure {
            instance_id: instance_id.to_string(),
            valid_options: accepted.len(),
            rejected,
            generator_responses,
        }));
    }
    let correct_position = rng::stream(seed, &[rng::TAG_WPQ_PLACE]).random_range(0..=DISTRACTORS);
    let mut options = accepted.clone();
    options.insert(correct_position, original.to_string());
    Ok(PerturbOutcome::Item(PerturbationQuizItem {
        instance_id: instance_id.to_string(),
        original: original.to_string(),
        perturbed: accepted,
        options,
        correct_position,
        rejected,
        generator_responses,
    }))
}

/// Puts each item to the subject as a five-choice quiz at temperature 0.
pub fn run_wpq(
    subject: &dyn ModelBackend,
    items: &[PerturbationQuizItem],
    meta: &DatasetMeta,
    max_tokens: u32,
) -> Result<QuizAccuracy, DetectorError> {
    require_generation(subject)?;
    let allowed = option_letters(DISTRACTORS + 2);
    let records = items
        .par_iter()
        .map(|item| {
            let options: [String; 4] = item
                .options
                .clone()
                .try_into()
                .map_err(|_| DetectorError::InvalidConfig(format!("item `{}` needs four options", item.instance_id)))?;
            let prompt = prompts::standard_quiz_prompt(meta, &options);
            ask_choice(subject, &item.instance_id, prompt, &allowed, item.correct_letter(), max_tokens)
                .map_err(|e| DetectorError::at(&item.instance_id, e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(QuizAccuracy::from_records(records))
}

pub fn run_wpq_detector(
    subject: &dyn ModelBackend,
    generator: &dyn ModelBackend,
    dataset: &Dataset,
    config: &WpqConfig,
    seed: u64,
) -> Result<WpqReport, DetectorError> {
    require_generation(subject)?;
    require_generation(generator)?;
    let positions = sample_positions(dataset.len(), config.sample_size, seed);
    let outcomes = positions
        .par_iter()
        .map(|&p| {
            let inst = &dataset.instances[p];
            let run = || -> Result<PerturbOutcome, DetectorError> {
                let text = render_instance(inst, config.render_mode(inst))?;
                let item_seed = rng::derive_seed(seed, &[rng::TAG_DETECTOR, inst.index as u64]);
                perturb_instance(generator, &inst.id, &text, config, item_seed)
            };
            run().map_err(|e| DetectorError::at(&inst.id, e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut quiz_items = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            PerturbOutcome::Item(i) => quiz_items.push(i),
            PerturbOutcome::Failed(f) => {
                log::warn!("wpq: perturbation failed for `{}`", f.instance_id);
                failures.push(f)
            }
        }
    }
    let quiz = run_wpq(subject, &quiz_items, &dataset.meta, config.quiz_max_tokens)?;
    Ok(WpqReport {
        raw_accuracy: accuracy(quiz.n_correct, quiz.n_items + failures.len()),
        quiz,
        failures,
        quiz_items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CompletionMode, MockBackend, MockScript};
    use crate::dataset::Split;

    fn fixed(text: &str) -> MockBackend {
        MockBackend::new(MockScript::new("gen").with_completion(CompletionMode::FixedText { text: text.into() }))
    }

    const ORIGINAL: &str = "In 1945 the treaty was signed in Paris by France.";

    #[test]
    fn well_formed_options_become_an_item() {
        let gen = fixed(
            "Option 1 - In 1945 the pact was signed in Paris by France.\n\n\
             Option 2 - In 1945 the treaty was inked in Paris by France.\n\n\
             Option 3 - In 1945 the accord was signed in Paris by France.\n\n\
             Option 4 - In 1945 the treaty got signed in Paris by France.",
        );
        let PerturbOutcome::Item(item) = perturb_instance(&gen, "x", ORIGINAL, &WpqConfig::default(), 1).unwrap() else {
            panic!("expected an item");
        };
        assert_eq!(item.perturbed.len(), 3);
        assert_eq!(item.options[item.correct_position], ORIGINAL);
        assert_eq!(item.generator_responses.len(), 1);
        assert!(item.perturbed.iter().all(|p| p != ORIGINAL));
    }

    #[test]
    fn copy_of_original_triggers_regeneration() {
        let gen = fixed(&format!(
            "Option 1 - {ORIGINAL}\nOption 2 - In 1945 the pact was signed in Paris by France.\n\
             Option 3 - In 1945 the accord was signed in Paris by France.\n\
             Option 4 - In 1945 the treaty got signed in Paris by France."
        ));
        let PerturbOutcome::Item(item) = perturb_instance(&gen, "x", ORIGINAL, &WpqConfig::default(), 1).unwrap() else {
            panic!("expected an item");
        };
        assert_eq!(item.rejected[0].reason, "identical to the original");
        assert_eq!(item.perturbed.len(), 3);

        // Two copies leave only two valid options, also after regeneration;
        // the regenerated duplicates are rejected as such.
        let gen = fixed(&format!(
            "Option 1 - {ORIGINAL}\nOption 2 - {ORIGINAL}\n\
             Option 3 - In 1945 the accord was signed in Paris by France.\n\
             Option 4 - In 1945 the treaty got signed in Paris by France."
        ));
        let PerturbOutcome::Failed(f) = perturb_instance(&gen, "x", ORIGINAL, &WpqConfig::default(), 1).unwrap() else {
            panic!("expected a failure");
        };
        assert_eq!(f.generator_responses.len(), 2);
        assert_eq!(f.valid_options, 2);
        assert!(f.rejected.iter().any(|r| r.reason == "duplicate of another option"));
    }

    #[test]
    fn validators() {
        assert_eq!(
            rejection_reason(ORIGINAL, "In 1946 the treaty was signed in Paris by France.", &[]).as_deref(),
            Some("numbers changed")
        );
        assert_eq!(
            rejection_reason(ORIGINAL, "In 1945 the treaty was signed in Lyon by France.", &[]).as_deref(),
            Some("proper nouns changed")
        );
        // A new sentence-initial capital is not a proper noun.
        assert_eq!(
            rejection_reason(ORIGINAL, "During 1945 the treaty was signed in Paris by France.", &[]),
            None
        );
        assert_eq!(digit_multiset("3 apples, 12 pears and 3 figs"), vec!["12", "3", "3"]);
        assert_eq!(capitalized_multiset("Alice met Bob. Then Carol left.\nDave"), vec!["Bob", "Carol"]);
    }

    #[test]
    fn option_parsing() {
        let opts = parse_options("Sure!\nOption 1 - a\nb\n\nOption 2: c\n**Option 3** - d\nOption 4 -");
        assert_eq!(opts, vec!["a\nb", "c", "d"]);
    }

    fn toy_dataset(n: usize) -> Dataset {
        let instances = (0..n)
            .map(|i| DatasetInstance {
                id: format!("w{i}"),
                index: i,
                question: format!("Which planet did the probe number {i} visit after leaving orbit around Mars?"),
                answer: "Jupiter".into(),
                choices: None,
                category: None,
                split: Split::Test,
            })
            .collect();
        Dataset::from_instances(
            DatasetMeta {
                name: "Toy".into(),
                split: Split::Test,
                description: String::new(),
            },
            instances,
        )
    }

    #[test]
    fn detector_end_to_end_with_mocks() {
        let gen = MockBackend::new(MockScript::new("gen").with_completion(CompletionMode::WordPerturb));
        let subject = MockBackend::new(MockScript::new("subj").with_completion(CompletionMode::FixedChoice { letter: 'E' }));
        let r = run_wpq_detector(&subject, &gen, &toy_dataset(20), &WpqConfig::default(), 3).unwrap();
        assert!(r.failures.is_empty());
        assert_eq!(r.quiz.n_items, 20);
        assert_eq!(r.quiz.accuracy, 0.0);
        assert!(r.quiz.items.iter().all(|i| i.parsed == Some('E')));
        for item in &r.quiz_items {
            assert!(item.perturbed.iter().all(|p| rejection_reason(&item.original, p, &[]).is_none()));
        }
    }

    #[test]
    fn failures_lower_raw_accuracy_only() {
        let gen = fixed("Option 1 - nothing useful");
        let subject = MockBackend::new(MockScript::new("subj").with_completion(CompletionMode::FixedChoice { letter: 'A' }));
        let r = run_wpq_detector(&subject, &gen, &toy_dataset(5), &WpqConfig::default(), 3).unwrap();
        assert_eq!(r.failures.len(), 5);
        assert_eq!(r.quiz.n_items, 0);
        assert_eq!(r.raw_accuracy, 0.0);
    }
}
