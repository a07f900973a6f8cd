//! Canonical-order test: does the model assign a higher likelihood to shards
//! in their published order than to shuffled copies of the same shards?

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{require_scoring, DetectorError};
use crate::backend::ModelBackend;
use crate::dataset::{render_instance, sample_positions, shard, Dataset, RenderMode};
use crate::rng;
use crate::stats::{shard_t_test, PValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CanonicalOrderConfig {
    pub sample_size: usize,
    pub num_shards: usize,
    pub num_permutations: usize,
    pub separator: String,
    pub render: RenderMode,
}

impl Default for CanonicalOrderConfig {
    fn default() -> Self {
        Self {
            sample_size: 100,
            num_shards: 10,
            num_permutations: 25,
            separator: "\n".into(),
            render: RenderMode::QaConcat,
        }
    }
}

impl CanonicalOrderConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.num_shards < 2 {
            return Err(DetectorError::InvalidConfig("num_shards must be >= 2".into()));
        }
        if self.num_permutations < 1 {
            return Err(DetectorError::InvalidConfig("num_permutations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardLikelihoods {
    pub shard: usize,
    pub instance_ids: Vec<String>,
    pub canonical: f64,
    pub permutations: Vec<f64>,
}

impl ShardLikelihoods {
    /// `canonical - mean(permutations)`.
    pub fn statistic(&self) -> f64 {
        self.canonical - self.permutations.iter().sum::<f64>() / self.permutations.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalOrderResult {
    pub per_shard: Vec<ShardLikelihoods>,
    /// Shards of a single instance, which have no alternative order.
    pub skipped_shards: Vec<usize>,
    pub p_value: PValue,
}

impl CanonicalOrderResult {
    pub fn recompute_p_value(per_shard: &[ShardLikelihoods]) -> Result<PValue, DetectorError> {
        let d: Vec<f64> = per_shard.iter().map(ShardLikelihoods::statistic).collect();
        Ok(shard_t_test(&d)?)
    }
}

/// Ordering for draw `draw` of shard `shard`: uniform over all orderings of
/// `len` items except the identity.
pub fn permutation_for(seed: u64, shard: usize, draw: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if len < 2 {
        return order;
    }
    let mut r = rng::stream(seed, &[rng::TAG_PERMUTE, shard as u64, draw as u64]);
    loop {
        order.shuffle(&mut r);
        if order.iter().enumerate().any(|(i, &v)| i != v) {
            return order;
        }
    }
}

/// Total log-likelihood over tokens that carry a logprob.
pub fn total_log_likelihood(backend: &dyn ModelBackend, text: &str) -> Result<f64, DetectorError> {
    let tokens = backend.score_tokens(text)?;
    let lps: Vec<f64> = tokens.iter().filter_map(|t| t.logprob).collect();
    if lps.is_empty() {
        return Err(DetectorError::Degenerate("no scorable tokens".into()));
    }
    Ok(lps.iter().sum())
}

pub fn canonical_order_pvalue(
    backend: &dyn ModelBackend,
    dataset: &Dataset,
    config: &CanonicalOrderConfig,
    seed: u64,
) -> Result<CanonicalOrderResult, DetectorError> {
    config.validate()?;
    require_scoring(backend)?;
    let positions = sample_positions(dataset.len(), config.sample_size, seed);
    let texts: Vec<(String, String)> = positions
        .iter()
        .map(|&p| {
            let inst = &dataset.instances[p];
            Ok((inst.id.clone(), render_instance(inst, config.render)?))
        })
        .collect::<Result<_, DetectorError>>()?;
    let shards = shard(&texts, config.num_shards)?;

    let mut skipped_shards = Vec::new();
    let mut jobs = Vec::new();
    for (j, members) in shards.iter().enumerate() {
        if members.len() < 2 {
            log::warn!("canonical order: shard {j} has a single instance and is skipped");
            skipped_shards.push(j);
            continue;
        }
        // Draw 0 is the canonical order; draws 1..=P are permutations.
        for draw in 0..=config.num_permutations {
            jobs.push((j, draw));
        }
    }

    let scored = jobs
        .par_iter()
        .map(|&(j, draw)| {
            let members = &shards[j];
            let order: Vec<usize> = if draw == 0 {
                (0..members.len()).collect()
            } else {
                permutation_for(seed, j, draw - 1, members.len())
            };
            let joined = order
                .iter()
                .map(|&i| members[i].1.as_str())
                .collect::<Vec<_>>()
                .join(&config.separator);
            total_log_likelihood(backend, &joined)
                .map_err(|e| DetectorError::at(&format!("shard {j}, draw {draw}"), e))
        })
        .collect::<Result<Vec<f64>, _>>()?;

    let stride = config.num_permutations + 1;
    let per_shard: Vec<ShardLikelihoods> = scored
        .chunks(stride)
        .zip(jobs.chunks(stride))
        .map(|(lls, js)| {
            let j = js[0].0;
            ShardLikelihoods {
                shard: j,
                instance_ids: shards[j].iter().map(|(id, _)| id.clone()).collect(),
                canonical: lls[0],
                permutations: lls[1..].to_vec(),
            }
        })
        .collect();
    if per_shard.len() < 2 {
        return Err(DetectorError::Degenerate(format!(
            "only {} shard(s) with two or more instances",
            per_shard.len()
        )));
    }
    let p_value = CanonicalOrderResult::recompute_p_value(&per_shard)?;
    Ok(CanonicalOrderResult {
        per_shard,
        skipped_shards,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript, ScoringMode};
    use crate::dataset::{DatasetInstance, DatasetMeta, Split};
    use std::collections::HashSet;

    fn dataset(n: usize) -> Dataset {
        let instances = (0..n)
            .map(|i| DatasetInstance {
                id: format!("d{i}"),
                index: i,
                question: format!("item {i} asks about topic{} and value{}", i * 7 % 13, i * 3 % 11),
                answer: format!("reply{i}"),
                choices: None,
                category: None,
                split: Split::Test,
            })
            .collect();
        Dataset::from_instances(
            DatasetMeta {
                name: "toy".into(),
                split: Split::Test,
                description: String::new(),
            },
            instances,
        )
    }

    fn contextual(ds: &Dataset, noise_std: f64, bonus: f64, seed: u64) -> MockBackend {
        let memorized = ds
            .instances
            .iter()
            .map(|i| render_instance(i, RenderMode::QaConcat).unwrap())
            .collect();
        MockBackend::new(MockScript::new("ctx").with_seed(seed).with_scoring(ScoringMode::ContextualLogprobs {
            base_nll: 6.0,
            noise_std,
            context: 4,
            memorized,
            canonical_bonus: bonus,
        }))
    }

    #[test]
    fn permutations_are_never_canonical() {
        for len in 2..6 {
            let mut seen = HashSet::new();
            for draw in 0..400 {
                let p = permutation_for(9, 0, draw, len);
                assert_ne!(p, (0..len).collect::<Vec<_>>());
                let mut sorted = p.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..len).collect::<Vec<_>>());
                seen.insert(p);
            }
            // Every non-identity ordering of a small shard shows up.
            if len <= 4 {
                assert_eq!(seen.len(), (1..=len).product::<usize>() - 1);
            }
        }
        assert_eq!(permutation_for(1, 2, 3, 7), permutation_for(1, 2, 3, 7));
    }

    #[test]
    fn order_loving_mock_is_detected() {
        let ds = dataset(100);
        let r = canonical_order_pvalue(&contextual(&ds, 0.01, 1.0, 4), &ds, &CanonicalOrderConfig::default(), 4).unwrap();
        assert_eq!(r.per_shard.len(), 10);
        for s in &r.per_shard {
            assert_eq!(s.permutations.len(), 25);
            assert!((s.statistic() - 1.0).abs() < 0.2, "{}", s.statistic());
        }
        assert!(r.p_value.value < 0.001);
        assert_eq!(r.p_value.resamples_or_df, 9);
    }

    #[test]
    fn single_instance_shards_are_skipped() {
        let ds = dataset(5);
        let cfg = CanonicalOrderConfig {
            num_shards: 4,
            num_permutations: 3,
            ..Default::default()
        };
        // Sizes 2,1,1,1 leave one usable shard.
        let err = canonical_order_pvalue(&contextual(&ds, 1.0, 0.0, 1), &ds, &cfg, 0).unwrap_err();
        assert!(matches!(err, DetectorError::Degenerate(_)));

        let ds = dataset(7);
        let r = canonical_order_pvalue(&contextual(&ds, 1.0, 0.0, 1), &ds, &cfg, 0).unwrap();
        assert_eq!(r.skipped_shards, vec![3]);
        assert_eq!(r.per_shard.len(), 3);
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = dataset(40);
        let cfg = CanonicalOrderConfig {
            sample_size: 40,
            num_shards: 4,
            num_permutations: 5,
            ..Default::default()
        };
        let b = contextual(&ds, 1.0, 0.0, 2);
        let a = canonical_order_pvalue(&b, &ds, &cfg, 11).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| canonical_order_pvalue(&b, &ds, &cfg, 11).unwrap());
        assert_eq!(a, c);
        assert_eq!(
            a.p_value,
            CanonicalOrderResult::recompute_p_value(&a.per_shard).unwrap()
        );
    }
}
