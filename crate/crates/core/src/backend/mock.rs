//! Deterministic scripted backends.
//!
//! Every output is a pure function of (script, seed, prompt or text).

use std::collections::{BTreeMap, HashMap};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_prompt, check_text, BackendCapabilities, BackendError, Completion, FinishReason,
    GenerationParams, ModelBackend, TokenLogProb,
};
use crate::rng::{derive_seed, fnv1a, gaussian_from_hash, hash_str, splitmix64};

/// Marker after which the echo-suffix mock copies the prompt verbatim.
pub const REF_MARKER: &str = "«REF»";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockInterface {
    /// Completion endpoint: text generation plus token scoring when scripted.
    #[default]
    Completion,
    /// Chat-only endpoint: text generation, never token scoring.
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum CompletionMode {
    /// Copies text after [`REF_MARKER`]; otherwise continues whichever corpus
    /// entry has the longest word-prefix quoted in the prompt. With a
    /// `trigger`, only prompts containing it are continued and all others get
    /// `fallback`.
    EchoSuffix {
        #[serde(default)]
        corpus: Vec<String>,
        #[serde(default)]
        trigger: Option<String>,
        #[serde(default)]
        fallback: String,
    },
    /// Always "The correct answer is (X)".
    FixedChoice { letter: char },
    FixedText { text: String },
    /// Picks uniformly among `letters`, or among the "(X) " option lines
    /// found in the prompt, seeded by (seed, prompt).
    SeededUniformChoice {
        #[serde(default)]
        letters: Option<Vec<char>>,
    },
    /// Looks up the prompt's SHA-256 hex digest.
    CannedCompletions { table: BTreeMap<String, String> },
    /// Answers perturbation requests with four word-level variants of the
    /// text inside the prompt's "Input Text:" block.
    WordPerturb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ScoringMode {
    /// Exact lookup on whitespace-normalized text. Every token carries a
    /// logprob (no absent first token).
    ScriptedLogprobs { table: BTreeMap<String, Vec<f64>> },
    /// Whitespace tokens; token i gets `-base_nll + noise_std * z`, clamped to
    /// at most 0, where z is a standard normal hashed from the token and its
    /// `context` predecessors. The first token has no logprob.
    ///
    /// When `memorized` documents are given, a scored text whose recognised
    /// documents appear in strictly ascending memorized order (at least two of
    /// them) gains `canonical_bonus` nats on its last token.
    ContextualLogprobs {
        #[serde(default = "default_base_nll")]
        base_nll: f64,
        #[serde(default = "default_noise_std")]
        noise_std: f64,
        #[serde(default = "default_context")]
        context: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        memorized: Vec<String>,
        #[serde(default)]
        canonical_bonus: f64,
    },
}

fn default_base_nll() -> f64 {
    6.0
}
fn default_noise_std() -> f64 {
    1.0
}
fn default_context() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub interface: MockInterface,
    #[serde(default)]
    pub completion: Option<CompletionMode>,
    #[serde(default)]
    pub scoring: Option<ScoringMode>,
}

impl MockScript {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            seed: 0,
            interface: MockInterface::Completion,
            completion: None,
            scoring: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_completion(mut self, mode: CompletionMode) -> Self {
        self.completion = Some(mode);
        self
    }

    pub fn with_scoring(mut self, mode: ScoringMode) -> Self {
        self.scoring = Some(mode);
        self
    }

    pub fn chat_only(mut self) -> Self {
        self.interface = MockInterface::Chat;
        self
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub struct MockBackend {
    script: MockScript,
    // line -> memorized document index
    memorized_lines: HashMap<String, usize>,
    option_line: Regex,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        // Lines shared by several documents (a repeated answer, say) cannot
        // identify a document and are left out.
        let mut owners: HashMap<String, Option<usize>> = HashMap::new();
        if let Some(ScoringMode::ContextualLogprobs { memorized, .. }) = &script.scoring {
            for (doc, text) in memorized.iter().enumerate() {
                for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                    owners
                        .entry(line.to_string())
                        .and_modify(|o| {
                            if *o != Some(doc) {
                                *o = None
                            }
                        })
                        .or_insert(Some(doc));
                }
            }
        }
        let memorized_lines = owners.into_iter().filter_map(|(l, o)| Some((l, o?))).collect();
        Self {
            script,
            memorized_lines,
            option_line: Regex::new(r"(?m)^\(([A-Z])\) ").expect("static regex"),
        }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn prompt_seed(&self, prompt: &str) -> u64 {
        derive_seed(self.script.seed, &[hash_str(prompt)])
    }

    fn generate(&self, mode: &CompletionMode, prompt: &str) -> Result<String, BackendError> {
        match mode {
            CompletionMode::EchoSuffix {
                corpus,
                trigger,
                fallback,
            } => {
                if let Some(pos) = prompt.find(REF_MARKER) {
                    return Ok(prompt[pos + REF_MARKER.len()..].to_string());
                }
                if let Some(t) = trigger {
                    if !prompt.contains(t.as_str()) {
                        return Ok(fallback.clone());
                    }
                }
                Ok(echo_from_corpus(corpus, prompt).unwrap_or_else(|| fallback.clone()))
            }
            CompletionMode::FixedChoice { letter } => {
                Ok(format!("The correct answer is ({letter})"))
            }
            CompletionMode::FixedText { text } => Ok(text.clone()),
            CompletionMode::SeededUniformChoice { letters } => {
                let found: Vec<char>;
                let pool: &[char] = match letters {
                    Some(l) if !l.is_empty() => l,
                    _ => {
                        let mut seen = Vec::new();
                        for cap in self.option_line.captures_iter(prompt) {
                            let c = cap[1].chars().next().expect("one letter");
                            if !seen.contains(&c) {
                                seen.push(c);
                            }
                        }
                        if seen.is_empty() {
                            seen = vec!['A', 'B', 'C', 'D'];
                        }
                        found = seen;
                        &found
                    }
                };
                let h = splitmix64(self.prompt_seed(prompt));
                let letter = pool[(h % pool.len() as u64) as usize];
                Ok(format!("The correct answer is ({letter})"))
            }
            CompletionMode::CannedCompletions { table } => {
                let key = prompt_hash(prompt);
                table
                    .get(&key)
                    .cloned()
                    .ok_or(BackendError::CannedMiss(key))
            }
            CompletionMode::WordPerturb => Ok(word_perturb(prompt, self.prompt_seed(prompt))),
        }
    }

    fn score(&self, mode: &ScoringMode, text: &str) -> Result<Vec<TokenLogProb>, BackendError> {
        match mode {
            ScoringMode::ScriptedLogprobs { table } => {
                let key = normalize_ws(text);
                let lps = table
                    .get(&key)
                    .ok_or_else(|| BackendError::ScriptMiss(key.clone()))?;
                let words: Vec<&str> = key.split(' ').collect();
                Ok(lps
                    .iter()
                    .enumerate()
                    .map(|(i, &lp)| {
                        let token_text = if words.len() == lps.len() {
                            if i == 0 {
                                words[0].to_string()
                            } else {
                                format!(" {}", words[i])
                            }
                        } else if i == 0 {
                            key.clone()
                        } else {
                            String::new()
                        };
                        TokenLogProb {
                            token_text,
                            logprob: Some(lp.min(0.0)),
                            position: i,
                        }
                    })
                    .collect())
            }
            ScoringMode::ContextualLogprobs {
                base_nll,
                noise_std,
                context,
                memorized,
                canonical_bonus,
            } => {
                let words: Vec<&str> = text.split_whitespace().collect();
                if words.is_empty() {
                    return Err(BackendError::InvalidRequest(
                        "text has no tokens".into(),
                    ));
                }
                let word_hashes: Vec<u64> = words.iter().map(|w| hash_str(w)).collect();
                let mut out = Vec::with_capacity(words.len());
                for (i, w) in words.iter().enumerate() {
                    let logprob = if i == 0 {
                        None
                    } else {
                        let lo = i.saturating_sub(*context);
                        let mut h = splitmix64(self.script.seed ^ word_hashes[i]);
                        for &ch in &word_hashes[lo..i] {
                            h = splitmix64(h ^ ch);
                        }
                        let z = gaussian_from_hash(h);
                        Some((-base_nll + noise_std * z).min(0.0))
                    };
                    out.push(TokenLogProb {
                        token_text: if i == 0 { w.to_string() } else { format!(" {w}") },
                        logprob,
                        position: i,
                    });
                }
                if !memorized.is_empty() && *canonical_bonus != 0.0 && self.ascending_memorized(text)
                {
                    if let Some(last) = out.last_mut().and_then(|t| t.logprob.as_mut()) {
                        *last = (*last + canonical_bonus).min(0.0);
                    }
                }
                Ok(out)
            }
        }
    }

    /// True when at least two memorized documents are recognised in `text`
    /// and they occur in strictly ascending memorized order.
    fn ascending_memorized(&self, text: &str) -> bool {
        let mut docs: Vec<usize> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(&d) = self.memorized_lines.get(line) {
                if docs.last() != Some(&d) {
                    docs.push(d);
                }
            }
        }
        docs.len() >= 2 && docs.windows(2).all(|w| w[0] < w[1])
    }
}

/// Continues the corpus entry with the longest word-prefix occurring in the prompt.
fn echo_from_corpus(corpus: &[String], prompt: &str) -> Option<String> {
    let prompt_norm = normalize_ws(prompt);
    let mut best: Option<(usize, String)> = None;
    for entry in corpus {
        let words: Vec<&str> = entry.split_whitespace().collect();
        for m in (1..words.len()).rev() {
            if best.as_ref().is_some_and(|(len, _)| *len >= m) {
                break;
            }
            let prefix = words[..m].join(" ");
            if prompt_norm.contains(&prefix) {
                best = Some((m, words[m..].join(" ")));
                break;
            }
        }
    }
    best.map(|(_, suffix)| suffix)
}

const PERTURB_SUFFIXES: [&str; 4] = ["ish", "ly", "ed", "er"];

fn word_perturb(prompt: &str, seed: u64) -> String {
    let body = match prompt.find("Input Text:") {
        Some(start) => {
            let rest = &prompt[start + "Input Text:".len()..];
            let rest = rest.strip_prefix('\n').unwrap_or(rest);
            match rest.find("\n---") {
                Some(end) => &rest[..end],
                None => rest,
            }
        }
        None => prompt,
    };

    // Byte spans of eligible words: lowercase ASCII, length >= 3, not
    // sentence-initial.
    let mut spans = Vec::new();
    let mut sentence_start = true;
    let mut offset = 0;
    for piece in body.split_inclusive(char::is_whitespace) {
        let word = piece.trim_end();
        if !word.is_empty() {
            let eligible = !sentence_start
                && word.len() >= 3
                && word.bytes().all(|b| b.is_ascii_lowercase());
            if eligible {
                spans.push((offset, offset + word.len()));
            }
            sentence_start = word.ends_with(['.', '!', '?']);
        }
        if piece.ends_with('\n') {
            sentence_start = true;
        }
        offset += piece.len();
    }

    let mut out = String::new();
    for (k, suffix) in PERTURB_SUFFIXES.iter().enumerate() {
        let option = if spans.is_empty() {
            body.to_string()
        } else {
            let h = splitmix64(seed ^ fnv1a(&[k as u8]));
            let (s, e) = spans[(h % spans.len() as u64) as usize];
            format!("{}{}{}{}", &body[..s], &body[s..e], suffix, &body[e..])
        };
        if k > 0 {
            out.push_str("\n\n");
        }
        out.push_str(&format!("Option {} - {}", k + 1, option));
    }
    out
}

impl ModelBackend for MockBackend {
    fn model_id(&self) -> &str {
        &self.script.id
    }

    fn capabilities(&self) -> BackendCapabilities {
        let generates = self.script.completion.is_some();
        match self.script.interface {
            MockInterface::Completion => BackendCapabilities {
                supports_completion: generates,
                supports_chat: false,
                supports_token_scoring: self.script.scoring.is_some(),
            },
            MockInterface::Chat => BackendCapabilities {
                supports_completion: false,
                supports_chat: generates,
                supports_token_scoring: false,
            },
        }
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, BackendError> {
        if !self.capabilities().can_generate() {
            return Err(BackendError::Capability {
                backend: self.script.id.clone(),
                capability: "text generation",
            });
        }
        params.validate()?;
        check_prompt(prompt)?;
        let mode = self.script.completion.as_ref().expect("checked above");
        Ok(Completion {
            text: self.generate(mode, prompt)?,
            finish_reason: FinishReason::Stop,
        })
    }

    fn score_tokens(&self, text: &str) -> Result<Vec<TokenLogProb>, BackendError> {
        if !self.capabilities().supports_token_scoring {
            return Err(BackendError::Capability {
                backend: self.script.id.clone(),
                capability: "token scoring",
            });
        }
        check_text(text)?;
        let mode = self.script.scoring.as_ref().expect("checked above");
        self.score(mode, text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn greedy() -> GenerationParams {
        GenerationParams::greedy(64)
    }

    fn mock(mode: CompletionMode) -> MockBackend {
        MockBackend::new(MockScript::new("m").with_completion(mode))
    }

    #[test]
    fn echo_suffix_copies_after_marker() {
        let m = mock(CompletionMode::EchoSuffix {
            corpus: vec![],
            trigger: None,
            fallback: String::new(),
        });
        let out = m.complete("Complete this: «REF»the cat sat", &greedy()).unwrap();
        assert_eq!(out.text, "the cat sat");
    }

    #[test]
    fn echo_suffix_continues_corpus_only_when_triggered() {
        let m = mock(CompletionMode::EchoSuffix {
            corpus: vec!["one two three\nfour five".into()],
            trigger: Some("DATASET".into()),
            fallback: "nothing".into(),
        });
        let hit = m.complete("DATASET piece: one two", &greedy()).unwrap();
        assert_eq!(hit.text, "three four five");
        let miss = m.complete("piece: one two", &greedy()).unwrap();
        assert_eq!(miss.text, "nothing");
    }

    #[test]
    fn fixed_choice_is_constant() {
        let m = mock(CompletionMode::FixedChoice { letter: 'C' });
        for p in ["quiz one", "another quiz"] {
            assert_eq!(m.complete(p, &greedy()).unwrap().text, "The correct answer is (C)");
        }
    }

    #[test]
    fn canned_miss_is_an_error() {
        let mut table = BTreeMap::new();
        table.insert(prompt_hash("known"), "yes".to_string());
        let m = mock(CompletionMode::CannedCompletions { table });
        assert_eq!(m.complete("known", &greedy()).unwrap().text, "yes");
        assert!(matches!(
            m.complete("unknown", &greedy()),
            Err(BackendError::CannedMiss(_))
        ));
    }

    #[test]
    fn seeded_uniform_choice_reads_option_lines_and_is_reproducible() {
        let m = MockBackend::new(
            MockScript::new("u")
                .with_seed(3)
                .with_completion(CompletionMode::SeededUniformChoice { letters: None }),
        );
        let prompt = "Pick one\n(A) x\n(B) y\n";
        let first = m.complete(prompt, &greedy()).unwrap().text;
        assert_eq!(first, m.complete(prompt, &greedy()).unwrap().text);
        assert!(first.ends_with("(A)") || first.ends_with("(B)"));
    }

    #[test]
    fn scripted_logprobs_lookup() {
        let mut table = BTreeMap::new();
        table.insert("a b c".to_string(), vec![-1.0, -2.0, -3.0]);
        table.insert("x y".to_string(), vec![-0.5, -9.0]);
        let m = MockBackend::new(
            MockScript::new("s").with_scoring(ScoringMode::ScriptedLogprobs { table }),
        );
        let toks = m.score_tokens("a b c").unwrap();
        let lps: Vec<f64> = toks.iter().map(|t| t.logprob.unwrap()).collect();
        assert_eq!(lps, vec![-1.0, -2.0, -3.0]);
        let joined: String = toks.iter().map(|t| t.token_text.as_str()).collect();
        assert_eq!(joined, "a b c");
        let sum: f64 = m
            .score_tokens("x  y")
            .unwrap()
            .iter()
            .filter_map(|t| t.logprob)
            .sum();
        assert_eq!(sum, -9.5);
    }

    #[test]
    fn chat_only_mock_refuses_scoring() {
        let m = MockBackend::new(
            MockScript::new("chat")
                .with_completion(CompletionMode::FixedText { text: "hi".into() })
                .with_scoring(ScoringMode::ScriptedLogprobs {
                    table: BTreeMap::new(),
                })
                .chat_only(),
        );
        assert!(m.capabilities().can_generate());
        assert!(matches!(
            m.score_tokens("anything"),
            Err(BackendError::Capability { .. })
        ));
    }

    #[test]
    fn contextual_logprobs_are_pure_and_bounded() {
        let m = MockBackend::new(MockScript::new("c").with_seed(11).with_scoring(
            ScoringMode::ContextualLogprobs {
                base_nll: 1.0,
                noise_std: 2.0,
                context: 2,
                memorized: vec![],
                canonical_bonus: 0.0,
            },
        ));
        let a = m.score_tokens("alpha beta gamma delta").unwrap();
        let b = m.score_tokens("alpha beta gamma delta").unwrap();
        assert_eq!(a, b);
        assert!(a[0].logprob.is_none());
        assert!(a.iter().filter_map(|t| t.logprob).all(|lp| lp <= 0.0));
    }

    #[test]
    fn memorized_order_earns_bonus() {
        let docs = vec!["q one\na one".to_string(), "q two\na two".to_string(), "q three\na three".to_string()];
        let script = |bonus| {
            MockScript::new("o").with_scoring(ScoringMode::ContextualLogprobs {
                base_nll: 5.0,
                noise_std: 0.0,
                context: 1,
                memorized: docs.clone(),
                canonical_bonus: bonus,
            })
        };
        let total = |m: &MockBackend, t: &str| -> f64 {
            m.score_tokens(t).unwrap().iter().filter_map(|t| t.logprob).sum()
        };
        let with = MockBackend::new(script(1.0));
        let without = MockBackend::new(script(0.0));
        let canonical = "q one\na one\nq three\na three";
        let shuffled = "q three\na three\nq one\na one";
        assert!((total(&with, canonical) - total(&without, canonical) - 1.0).abs() < 1e-12);
        assert_eq!(total(&with, shuffled), total(&without, shuffled));
    }

    #[test]
    fn word_perturb_emits_four_distinct_options() {
        let m = mock(CompletionMode::WordPerturb);
        let prompt = "Instruction...\nInput Text:\nThe quick brown fox jumps over 3 lazy dogs.\n---\nFormat:";
        let out = m.complete(prompt, &greedy()).unwrap().text;
        let opts: Vec<&str> = out.split("\n\n").collect();
        assert_eq!(opts.len(), 4);
        for (i, o) in opts.iter().enumerate() {
            assert!(o.starts_with(&format!("Option {} - ", i + 1)));
            assert!(o.contains(" 3 "));
        }
        let mut uniq = opts.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 4);
    }
}
