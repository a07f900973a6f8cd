//! Deliberately contaminated fine-tuning sets with a known proportion.
//!
//! Instances are taken in aligned blocks of `pack_size` consecutive
//! instances so each packed training record keeps the dataset's local order.
//! Training itself happens elsewhere; the manifest carries the regimen.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, GenerationParams, ModelBackend};
use crate::dataset::{Dataset, DatasetInstance};
use crate::prompts;
use crate::rng;

pub const DEFAULT_PACK_SIZE: usize = 4;
pub const DEFAULT_LEARNING_RATE: f64 = 8e-6;
pub const DEFAULT_EPOCHS: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedInstance {
    pub source: DatasetInstance,
    pub cot_answer: String,
    pub generator_model: String,
}

impl AugmentedInstance {
    pub fn render(&self) -> String {
        format!("{}\n{}", self.source.question, self.cot_answer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedRecord {
    pub text: String,
    pub source_indices: Vec<usize>,
    pub source_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleManifest {
    pub dataset: String,
    pub split: String,
    pub proportion: f64,
    pub pack_size: usize,
    pub learning_rate: f64,
    pub epochs: u32,
    pub full_fine_tuning: bool,
    pub seed: u64,
    pub generator_model: String,
    pub selection: String,
    pub dataset_size: usize,
    pub blocks_selected: usize,
    pub blocks_dropped: usize,
    pub included_instances: usize,
    pub records: usize,
    pub training_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub manifest: OracleManifest,
    pub records: Vec<PackedRecord>,
    pub training_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Replaces the answer with a generated step-by-step solution. `None` when
/// the generator returns nothing twice.
pub fn augment_answer_cot(
    generator: &dyn ModelBackend,
    instance: &DatasetInstance,
) -> Result<Option<AugmentedInstance>, BackendError> {
    let prompt = prompts::cot_prompt(&instance.question);
    let params = GenerationParams::greedy(1024);
    for _ in 0..2 {
        let text = generator.complete(&prompt, &params)?.text;
        let cot = text.trim();
        if !cot.is_empty() {
            return Ok(Some(AugmentedInstance {
                source: instance.clone(),
                cot_answer: cot.to_string(),
                generator_model: generator.model_id().to_string(),
            }));
        }
    }
    log::warn!("oracle: empty solution twice for `{}`, dropping it", instance.id);
    Ok(None)
}

/// Number of aligned blocks for `proportion` percent of `len` instances:
/// the nearest whole block count, ties going to the smaller one.
pub fn block_count(len: usize, proportion: f64, pack_size: usize) -> usize {
    let target_blocks = proportion / 100.0 * len as f64 / pack_size as f64;
    ((target_blocks - 0.5).ceil().max(0.0) as usize).min(len / pack_size)
}

/// Start positions of the selected blocks, ascending.
pub fn select_blocks(len: usize, proportion: f64, pack_size: usize, seed: u64) -> Result<Vec<usize>, OracleError> {
    if !(0.0..=100.0).contains(&proportion) {
        return Err(OracleError::InvalidArgument(format!(
            "proportion must lie in [0, 100], got {proportion}"
        )));
    }
    if pack_size == 0 {
        return Err(OracleError::InvalidArgument("pack_size must be >= 1".into()));
    }
    let k = block_count(len, proportion, pack_size);
    if proportion > 0.0 && k == 0 {
        return Err(OracleError::InvalidArgument(format!(
            "{proportion}% of {len} instances is less than one block of {pack_size}"
        )));
    }
    let mut r = rng::stream(seed, &[rng::TAG_ORACLE_BLOCKS]);
    let mut blocks = index::sample(&mut r, len / pack_size, k).into_vec();
    blocks.sort_unstable();
    Ok(blocks.into_iter().map(|b| b * pack_size).collect())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), OracleError> {
    crate::write_atomic(path, bytes).map_err(|source| OracleError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Augments the selected blocks and writes `<stem>.jsonl` and
/// `<stem>.manifest.json` under `out_dir`. A block with any failed
/// augmentation is dropped whole.
pub fn build_contaminated_set(
    dataset: &Dataset,
    proportion: f64,
    pack_size: usize,
    generator: &dyn ModelBackend,
    seed: u64,
    out_dir: &Path,
) -> Result<OracleOutput, OracleError> {
    let starts = select_blocks(dataset.len(), proportion, pack_size, seed)?;
    let augmented = starts
        .par_iter()
        .map(|&s| {
            dataset.instances[s..s + pack_size]
                .iter()
                .map(|inst| augment_answer_cot(generator, inst))
                .collect::<Result<Option<Vec<_>>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut records = Vec::new();
    let mut blocks_dropped = 0;
    for block in augmented {
        let Some(block) = block else {
            blocks_dropped += 1;
            continue;
        };
        records.push(PackedRecord {
            text: block.iter().map(AugmentedInstance::render).collect::<Vec<_>>().join("\n\n"),
            source_indices: block.iter().map(|a| a.source.index).collect(),
            source_ids: block.iter().map(|a| a.source.id.clone()).collect(),
        });
    }

    let stem = format!(
        "{}-{}-p{}-pack{}",
        dataset.meta.name, dataset.meta.split, proportion, pack_size
    );
    let training_path = out_dir.join(format!("{stem}.jsonl"));
    let manifest_path = out_dir.join(format!("{stem}.manifest.json"));
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r).expect("record serializes"));
        jsonl.push('\n');
    }
    let manifest = OracleManifest {
        dataset: dataset.meta.name.clone(),
        split: dataset.meta.split.to_string(),
        proportion,
        pack_size,
        learning_rate: DEFAULT_LEARNING_RATE,
        epochs: DEFAULT_EPOCHS,
        full_fine_tuning: true,
        seed,
        generator_model: generator.model_id().to_string(),
        selection: "seeded aligned blocks".into(),
        dataset_size: dataset.len(),
        blocks_selected: starts.len(),
        blocks_dropped,
        included_instances: records.len() * pack_size,
        records: records.len(),
        training_file: training_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    write_atomic(&training_path, jsonl.as_bytes())?;
    let mut manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    manifest_json.push('\n');
    write_atomic(&manifest_path, manifest_json.as_bytes())?;
    Ok(OracleOutput {
        manifest,
        records,
        training_path,
        manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CompletionMode, MockBackend, MockScript};
    use crate::dataset::{DatasetMeta, Split};
    use proptest::prelude::*;

    fn dataset(n: usize) -> Dataset {
        let instances = (0..n)
            .map(|i| DatasetInstance {
                id: format!("g{i}"),
                index: i,
                question: format!("  What is {i} + {i}?\n"),
                answer: format!("{}", 2 * i),
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

    fn solver(text: &str) -> MockBackend {
        MockBackend::new(MockScript::new("solver").with_completion(CompletionMode::FixedText { text: text.into() }))
    }

    #[test]
    fn block_counts() {
        assert_eq!(block_count(100, 100.0, 4), 25);
        assert_eq!(block_count(100, 50.0, 4), 12);
        assert_eq!(block_count(100, 25.0, 4), 6);
        assert_eq!(block_count(100, 0.0, 4), 0);
        assert_eq!(block_count(102, 100.0, 4), 25);
        assert!(matches!(select_blocks(100, 1.0, 4, 0), Err(OracleError::InvalidArgument(_))));
        assert!(select_blocks(100, 101.0, 4, 0).is_err());
        assert!(select_blocks(100, 50.0, 0, 0).is_err());
    }

    #[test]
    fn full_proportion_covers_everything() {
        let dir = tempfile::tempdir().unwrap();
        let out = build_contaminated_set(&dataset(100), 100.0, 4, &solver("Step 1 ... answer: A"), 7, dir.path()).unwrap();
        assert_eq!(out.records.len(), 25);
        let mut all: Vec<usize> = out.records.iter().flat_map(|r| r.source_indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(out.manifest.learning_rate, 8e-6);
        assert_eq!(out.manifest.epochs, 3);

        let lines = std::fs::read_to_string(&out.training_path).unwrap();
        assert_eq!(lines.lines().count(), 25);
        let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert!(first["text"].as_str().unwrap().starts_with("  What is 0 + 0?\n\nStep 1 ... answer: A\n\n"));
        let manifest: OracleManifest = serde_json::from_str(&std::fs::read_to_string(&out.manifest_path).unwrap()).unwrap();
        assert_eq!(manifest, out.manifest);
    }

    #[test]
    fn zero_proportion_writes_an_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let out = build_contaminated_set(&dataset(100), 0.0, 4, &solver("x"), 7, dir.path()).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(std::fs::read_to_string(&out.training_path).unwrap(), "");
        assert_eq!(out.manifest.proportion, 0.0);
    }

    #[test]
    fn empty_generations_drop_the_block() {
        let dir = tempfile::tempdir().unwrap();
        let out = build_contaminated_set(&dataset(20), 100.0, 4, &solver("   "), 7, dir.path()).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.manifest.blocks_dropped, 5);
        assert!(augment_answer_cot(&solver(""), &dataset(1).instances[0]).unwrap().is_none());
    }

    #[test]
    fn questions_survive_augmentation_verbatim() {
        let ds = dataset(1000);
        let gen = solver("Let us think step by step. The answer is 4.");
        for inst in &ds.instances {
            let a = augment_answer_cot(&gen, inst).unwrap().unwrap();
            assert_eq!(a.source.question.as_bytes(), inst.question.as_bytes());
        }
    }

    #[test]
    fn emission_is_deterministic() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ds = dataset(100);
        let a = build_contaminated_set(&ds, 50.0, 4, &solver("s"), 3, d1.path()).unwrap();
        let b = build_contaminated_set(&ds, 50.0, 4, &solver("s"), 3, d2.path()).unwrap();
        assert_eq!(
            std::fs::read(&a.training_path).unwrap(),
            std::fs::read(&b.training_path).unwrap()
        );
    }

    proptest! {
        #[test]
        fn selections_are_aligned_and_counted(len in 1usize..300, proportion in 0.0f64..=100.0, pack in 1usize..8, seed in any::<u64>()) {
            match select_blocks(len, proportion, pack, seed) {
                Ok(starts) => {
                    prop_assert!(starts.windows(2).all(|w| w[0] + pack <= w[1]));
                    prop_assert!(starts.iter().all(|s| s % pack == 0 && s + pack <= len));
                    let included = starts.len() * pack;
                    let target = proportion / 100.0 * len as f64;
                    // Nearest whole block: off by at most half a block, unless
                    // capped by the trailing partial block.
                    prop_assert!((included as f64 - target).abs() <= pack as f64 / 2.0 + (len % pack) as f64);
                }
                Err(_) => prop_assert!(proportion > 0.0 && block_count(len, proportion, pack) == 0),
            }
        }
    }
}
