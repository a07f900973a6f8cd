//! Bundled prompt templates and their rendering.
//!
//! Substitution is a single left-to-right pass, so placeholder-like text
//! inside instance content is never expanded.

use crate::dataset::DatasetMeta;

pub const PERTURBATION: &str = include_str!("../templates/perturbation.txt");
pub const STANDARD_QUIZ: &str = include_str!("../templates/standard_quiz.txt");
pub const LOCAL_ORDER_QUIZ: &str = include_str!("../templates/local_order_quiz.txt");
pub const JUDGE_ICL: &str = include_str!("../templates/judge_icl.txt");
pub const OVERLAP_GUIDED: &str = include_str!("../templates/overlap_guided.txt");
pub const OVERLAP_GENERAL: &str = include_str!("../templates/overlap_general.txt");
pub const COT_AUGMENT: &str = include_str!("../templates/cot_augment.txt");

/// Text of the fixed fifth quiz option.
pub const NONE_OF_THE_OPTIONS: &str = "None of the provided options";

/// Replaces each placeholder occurrence with its value in one pass.
pub fn fill(template: &str, subs: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    loop {
        let next = subs
            .iter()
            .filter_map(|(k, v)| rest.find(k).map(|pos| (pos, *k, *v)))
            .min_by_key(|(pos, k, _)| (*pos, std::cmp::Reverse(k.len())));
        match next {
            Some((pos, k, v)) => {
                out.push_str(&rest[..pos]);
                out.push_str(v);
                rest = &rest[pos + k.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

pub fn perturbation_prompt(instance_text: &str) -> String {
    fill(PERTURBATION, &[("{instance}", instance_text)])
}

/// `options` fills (A)..(D); (E) is always [`NONE_OF_THE_OPTIONS`].
pub fn standard_quiz_prompt(meta: &DatasetMeta, options: &[String; 4]) -> String {
    fill(
        STANDARD_QUIZ,
        &[
            ("[split]", meta.split.as_str()),
            ("[dataset]", &meta.name),
            ("{choices[\"(A)\"]}", &options[0]),
            ("{choices[\"(B)\"]}", &options[1]),
            ("{choices[\"(C)\"]}", &options[2]),
            ("{choices[\"(D)\"]}", &options[3]),
            ("{choices[\"(E)\"]}", NONE_OF_THE_OPTIONS),
        ],
    )
}

/// Collapses a multi-line instance onto one line.
pub fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Options are listed one per line as "(A) text" after the "Options:" label.
pub fn local_order_prompt(meta: &DatasetMeta, target: &str, options: &[String]) -> String {
    let letters = crate::text_metrics::option_letters(options.len());
    let listed: String = letters
        .iter()
        .zip(options)
        .map(|(l, o)| format!("\n({l}) {}", one_line(o)))
        .collect();
    fill(
        LOCAL_ORDER_QUIZ,
        &[
            ("[Description of dataset]", &meta.description),
            ("[split]", meta.split.as_str()),
            ("[dataset name]", &meta.name),
            ("[tar example]", &one_line(target)),
            ("[options]", &listed),
        ],
    )
}

pub fn judge_prompt(reference: &str, candidate: &str) -> String {
    fill(
        JUDGE_ICL,
        &[("{reference_text}", reference), ("{candidate_text}", candidate)],
    )
}

pub fn overlap_guided_prompt(meta: &DatasetMeta, first_piece: &str) -> String {
    fill(
        OVERLAP_GUIDED,
        &[
            ("{split}", meta.split.as_str()),
            ("{dataset}", &meta.name),
            ("{first_piece}", first_piece),
        ],
    )
}

pub fn overlap_general_prompt(first_piece: &str) -> String {
    fill(OVERLAP_GENERAL, &[("{first_piece}", first_piece)])
}

pub fn cot_prompt(question: &str) -> String {
    fill(COT_AUGMENT, &[("{question}", question)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use sha2::{Digest, Sha256};

    fn meta() -> DatasetMeta {
        DatasetMeta {
            name: "GSM8K".into(),
            split: Split::Train,
            description: "Grade school math word problems.".into(),
        }
    }

    fn sha(s: &str) -> String {
        hex::encode(Sha256::digest(s.as_bytes()))
    }

    #[test]
    fn bundled_templates_are_pinned() {
        // Guards against accidental edits; regenerate deliberately if a
        // template changes.
        for (name, t) in [
            ("perturbation", PERTURBATION),
            ("standard_quiz", STANDARD_QUIZ),
            ("local_order_quiz", LOCAL_ORDER_QUIZ),
            ("judge_icl", JUDGE_ICL),
        ] {
            assert!(!t.ends_with('\n'), "{name}");
            assert!(!t.lines().any(|l| l.ends_with(' ')), "{name}");
        }
        assert_eq!(STANDARD_QUIZ.matches("{choices[").count(), 5);
        assert!(JUDGE_ICL.starts_with("INSTRUCTION:\n"));
        assert!(JUDGE_ICL.ends_with("{candidate_text}\n\nANSWER:"));
        assert!(PERTURBATION.ends_with("Format:\nOption 1 -\nOption 2 -\nOption 3 -\nOption 4 -"));
        assert_eq!(sha(JUDGE_ICL), "04ccf2384cc96f8c5f76d4908e54f2cbd50c0e5b386619c05ab953dbf512d788");
        assert_eq!(sha(STANDARD_QUIZ), "547cff414706649795277d225fa362a581a67d427ce9dedf3e5be173b305749d");
        assert_eq!(sha(PERTURBATION), "7237a1dc71846088a834bde52166189e066b9cfd43cbcc2dd16a05c860ac91bd");
        assert_eq!(sha(LOCAL_ORDER_QUIZ), "16bc3737414d880794ac2471975afee803604426e4e4f4a595e5a11335415a9d");
    }

    #[test]
    fn fill_is_single_pass() {
        assert_eq!(fill("a {x} b", &[("{x}", "{x}{y}"), ("{y}", "Y")]), "a {x}{y} b");
        assert_eq!(fill("[split] [split]", &[("[split]", "test")]), "test test");
        assert_eq!(fill("no placeholders", &[("{x}", "1")]), "no placeholders");
    }

    #[test]
    fn quiz_prompt_lists_five_options() {
        let opts = ["w".to_string(), "x".into(), "y".into(), "z".into()];
        let p = standard_quiz_prompt(&meta(), &opts);
        assert!(p.contains("from the train split of the GSM8K dataset"));
        assert!(p.contains("\n(A) w\n(B) x\n(C) y\n(D) z\n(E) None of the provided options\n---\nAnswer:"));
    }

    #[test]
    fn local_order_prompt_layout() {
        let p = local_order_prompt(&meta(), "first\nline", &["one".into(), "two\n(C) three".into()]);
        assert!(p.starts_with("Grade school math word problems.\n\nGiven the target data example in the train of the GSM8K dataset"));
        assert!(p.contains("Target example: first line\n"));
        assert!(p.ends_with("Options: \n(A) one\n(B) two (C) three"));
    }

    #[test]
    fn judge_and_overlap_prompts() {
        let j = judge_prompt("ref", "cand");
        assert!(j.ends_with("REFERENCE TEXT:\nref\n\nCANDIDATE TEXT:\ncand\n\nANSWER:"));
        let g = overlap_guided_prompt(&meta(), "Natalia sold clips");
        assert!(g.contains("train split of the GSM8K dataset"));
        assert!(g.ends_with("First Piece: Natalia sold clips\n\nSecond Piece:"));
        assert!(!overlap_general_prompt("x").contains("GSM8K"));
        assert!(perturbation_prompt("Q?").contains("Input Text:\nQ?\n---"));
    }
}
