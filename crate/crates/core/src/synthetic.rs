//! Deterministic synthetic word-problem datasets for demos and tests.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::dataset::{Dataset, DatasetInstance, DatasetMeta, Split};
use crate::rng;

const NAMES: &[&str] = &[
    "Alice", "Bruno", "Chiara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas", "Keiko", "Luis",
    "Maya", "Nikos", "Olga", "Pablo", "Quinn", "Rosa", "Sven", "Tara",
];
const PLACES: &[&str] = &[
    "Lisbon", "Oslo", "Kyoto", "Quito", "Nairobi", "Dublin", "Hanoi", "Lima", "Perth", "Zagreb",
];
const ITEMS: &[&str] = &[
    "apples", "pencils", "marbles", "stamps", "cookies", "tickets", "shells", "candles", "buttons", "books",
];
const VERBS: &[&str] = &["buys", "collects", "finds", "bakes", "receives", "gathers", "orders", "packs"];
const ADJECTIVES: &[&str] = &["small", "green", "heavy", "shiny", "wooden", "fresh", "plain", "round"];
const CATEGORIES: &[&str] = &["arithmetic", "rates", "sharing", "totals"];

fn question(index: usize, r: &mut impl Rng) -> (String, String, &'static str) {
    let name = NAMES.choose(r).expect("non-empty");
    let place = PLACES.choose(r).expect("non-empty");
    let item = ITEMS.choose(r).expect("non-empty");
    let verb = VERBS.choose(r).expect("non-empty");
    let adjective = ADJECTIVES.choose(r).expect("non-empty");
    let a = r.random_range(2..50u32);
    let b = r.random_range(2..20u32);
    let category = CATEGORIES[index % CATEGORIES.len()];
    // The problem number up front keeps every opening distinct.
    let (text, answer) = match category {
        "arithmetic" => (
            format!("Problem {index}: In {place}, {name} {verb} {a} {adjective} {item} every morning and then {b} more during the evening. How many {item} does {name} have after one day?"),
            a + b,
        ),
        "rates" => (
            format!("Problem {index}: A shop near {place} sells {adjective} {item} at {b} dollars each. {name} pays for {a} of them with cash. What does {name} spend in total?"),
            a * b,
        ),
        "sharing" => (
            format!("Problem {index}: {name} {verb} {} {adjective} {item} at the market in {place} and shares them equally among {b} friends. How many {item} does each friend get?", a * b),
            a,
        ),
        _ => (
            format!("Problem {index}: During a trip to {place}, {name} {verb} {a} {adjective} {item} but gives {b} away to a neighbour. How many {item} remain with {name}?"),
            a.abs_diff(b),
        ),
    };
    (text, answer.to_string(), category)
}

/// `n` word problems drawn from `seed`. Each question mixes lowercase words,
/// numbers and capitalized names so perturbation and quiz detectors have
/// something to work with.
pub fn word_problems(name: &str, split: Split, n: usize, seed: u64) -> Dataset {
    let instances = (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::TAG_SYNTHETIC, i as u64]);
            let (question, answer, category) = question(i, &mut r);
            DatasetInstance {
                id: format!("{name}-{i:04}"),
                index: i,
                question,
                answer,
                choices: None,
                category: Some(category.to_string()),
                split,
            }
        })
        .collect();
    Dataset::from_instances(
        DatasetMeta {
            name: name.to_string(),
            split,
            description: "Synthetic grade-school word problems with numeric answers.".to_string(),
        },
        instances,
    )
}

/// Serializes a dataset as JSONL, one instance per line.
pub fn to_jsonl(dataset: &Dataset) -> String {
    let mut out = String::new();
    for inst in &dataset.instances {
        let line = serde_json::json!({
            "id": inst.id,
            "question": inst.question,
            "answer": inst.answer,
            "category": inst.category,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

pub fn write_jsonl(dataset: &Dataset, path: &Path) -> std::io::Result<()> {
    crate::write_atomic(path, to_jsonl(dataset).as_bytes())
}
