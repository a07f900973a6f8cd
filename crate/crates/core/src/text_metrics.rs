//! ROUGE-L overlap and model-answer parsing.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeLScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub lcs_length: usize,
}

impl RougeLScore {
    pub const ZERO: RougeLScore = RougeLScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        lcs_length: 0,
    };
}

/// Lowercased word tokens. Punctuation becomes whitespace, except apostrophes
/// and hyphens between two alphanumeric characters.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut cleaned = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cleaned.extend(c.to_lowercase());
        } else if matches!(c, '\'' | '’' | '-')
            && i > 0
            && chars[i - 1].is_alphanumeric()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            cleaned.push(c);
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Length of the longest common subsequence, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L from pre-tokenized sequences (F-measure with β = 1).
pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeLScore {
    let lcs = lcs_length(candidate, reference);
    let ratio = |den: usize| if den == 0 { 0.0 } else { lcs as f64 / den as f64 };
    let precision = ratio(candidate.len());
    let recall = ratio(reference.len());
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    RougeLScore {
        precision,
        recall,
        f1,
        lcs_length: lcs,
    }
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeLScore {
    rouge_l_tokens(&normalize_tokens(candidate), &normalize_tokens(reference))
}

/// Equality after ROUGE normalization; empty texts never match.
pub fn normalized_equal(a: &str, b: &str) -> bool {
    let (a, b) = (normalize_tokens(a), normalize_tokens(b));
    !a.is_empty() && a == b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedChoice {
    pub letter: Option<char>,
    pub raw_span: String,
}

fn choice_patterns() -> &'static [Regex; 2] {
    static PATTERNS: OnceLock<[Regex; 2]> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            // "The correct answer is (B)" / "The answer is: D"
            Regex::new(r"(?i:the\s+(?:correct\s+)?answer\s+is)\s*:?\s*\(?([A-Z])\)?(?:[^A-Za-z0-9]|$)")
                .expect("static regex"),
            // a line holding only an option letter: "C", "(C)", "C."
            Regex::new(r"(?m)^[ \t]*\(?([A-Z])\)?[.)]?[ \t]*$").expect("static regex"),
        ]
    })
}

/// Finds the last recognized answer statement naming an allowed letter.
pub fn parse_choice(text: &str, allowed: &[char]) -> ParsedChoice {
    let mut best: Option<(usize, char, String)> = None;
    for re in choice_patterns() {
        for cap in re.captures_iter(text) {
            let group = cap.get(1).expect("pattern has one group");
            let letter = group.as_str().chars().next().expect("one char");
            if !allowed.contains(&letter) {
                continue;
            }
            let whole = cap.get(0).expect("match");
            if best.as_ref().is_none_or(|(pos, _, _)| group.start() > *pos) {
                best = Some((group.start(), letter, whole.as_str().trim().to_string()));
            }
        }
    }
    match best {
        Some((_, letter, raw_span)) => ParsedChoice {
            letter: Some(letter),
            raw_span,
        },
        None => ParsedChoice {
            letter: None,
            raw_span: String::new(),
        },
    }
}

/// Judge verdict: leading "Yes"/"No" (after an optional "ANSWER:").
pub fn parse_yes_no(text: &str) -> Option<bool> {
    let t = text.trim_start();
    let t = match t.get(..7) {
        Some(head) if head.eq_ignore_ascii_case("answer:") => t[7..].trim_start(),
        _ => t,
    };
    let word: String = t
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_ascii_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Letters `A`, `B`, ... for `n` options.
pub fn option_letters(n: usize) -> Vec<char> {
    (0..n.min(26)).map(|i| (b'A' + i as u8) as char).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive LCS: longest subsequence of `a` (by enumerating all 2^|a|
    /// subsets) that is also a subsequence of `b`.
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let is_subseq = |s: &[u8]| {
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == x))
        };
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            if sub.len() > best && is_subseq(&sub) {
                best = sub.len();
            }
        }
        best
    }

    #[test]
    fn rouge_examples() {
        let same = rouge_l("the cat sat", "the cat sat");
        assert_eq!(same.f1, 1.0);

        // Enumeration: "the cat" is a subsequence of "the cat sat", LCS = 2.
        assert_eq!(brute_lcs(b"tc", b"tcs"), 2);
        let partial = rouge_l("the cat", "the cat sat");
        assert_eq!(partial.lcs_length, 2);
        assert_eq!(partial.precision, 1.0);
        assert!((partial.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((partial.f1 - 0.8).abs() < 1e-15);

        assert_eq!(rouge_l("", "anything at all"), RougeLScore::ZERO);
        assert_eq!(rouge_l("words", ""), RougeLScore::ZERO);
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(
            normalize_tokens("Don't  STOP-me, now! (ok)  -x- 'quoted'"),
            vec!["don't", "stop-me", "now", "ok", "x", "quoted"]
        );
    }

    #[test]
    fn parse_choice_examples() {
        let all: Vec<char> = "ABCDE".chars().collect();
        let four: Vec<char> = "ABCD".chars().collect();
        assert_eq!(parse_choice("Reasoning... The correct answer is (B).", &all).letter, Some('B'));
        assert_eq!(parse_choice("I don't know.", &four).letter, None);
        // "(A)" at offset 0 is not a recognised pattern; "The answer is D" at
        // offset 11 is the only (and thus last) match.
        assert_eq!(parse_choice("(A) no wait. The answer is D", &four).letter, Some('D'));
        assert_eq!(parse_choice("The answer is A.\nOn reflection:\n(C)\n", &four).letter, Some('C'));
        assert_eq!(parse_choice("The answer is E", &four).letter, None);
        assert_eq!(parse_choice("the answer is: c", &four).letter, None);
        assert_eq!(parse_choice("The answer is A", &four).raw_span, "The answer is A");
    }

    #[test]
    fn yes_no() {
        assert_eq!(parse_yes_no("Yes (near-exact match)"), Some(true));
        assert_eq!(parse_yes_no("  no."), Some(false));
        assert_eq!(parse_yes_no("ANSWER: Yes"), Some(true));
        assert_eq!(parse_yes_no("Perhaps"), None);
        assert_eq!(parse_yes_no("Nope"), None);
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in proptest::collection::vec(0u8..5, 0..10), b in proptest::collection::vec(0u8..5, 0..10)) {
            prop_assert_eq!(lcs_length(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn rouge_identity_and_symmetry(a in "[a-z ]{0,40}", b in "[a-z ]{0,40}") {
            if !normalize_tokens(&a).is_empty() {
                prop_assert_eq!(rouge_l(&a, &a).f1, 1.0);
            }
            let ab = rouge_l(&a, &b);
            let ba = rouge_l(&b, &a);
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.recall, ba.precision);
            prop_assert!((ab.f1 - ba.f1).abs() < 1e-15);
        }

        #[test]
        fn parse_choice_respects_allowed(text in ".{0,80}", n in 1usize..6) {
            let allowed = option_letters(n);
            if let Some(l) = parse_choice(&text, &allowed).letter {
                prop_assert!(allowed.contains(&l));
            }
        }
    }
}
