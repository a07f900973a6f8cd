//! Rank correlation, paired bootstrap, shard-level t-test and summaries.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::rng;

/// Mean and population (n-denominator) standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    OneSided,
    TwoSided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValue {
    pub value: f64,
    pub test_name: String,
    pub sidedness: Sidedness,
    /// Bootstrap resamples, or degrees of freedom for a t-test.
    pub resamples_or_df: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub const MIN_RESAMPLES: usize = 1000;
pub const DEFAULT_RESAMPLES: usize = 10_000;

pub fn summarize(values: &[f64]) -> Result<SummaryStat, StatsError> {
    if values.is_empty() {
        return Err(StatsError::TooFew { needed: 1, got: 0 });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(SummaryStat {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFew { needed: 2, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::InvalidArgument("non-finite value".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if constant(x) || constant(y) {
        return Err(StatsError::Degenerate(
            "correlation undefined for a constant vector".into(),
        ));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// One-sided paired bootstrap for mean(a - b) > 0.
///
/// Resamples the paired differences with replacement; resample `r` draws from
/// its own stream keyed by (seed, r), so the result does not depend on
/// evaluation order. `p = (1 + #{resampled mean <= 0}) / (resamples + 1)`.
pub fn bootstrap_pvalue(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<PValue, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatsError::TooFew { needed: 2, got: a.len() });
    }
    if resamples < MIN_RESAMPLES {
        return Err(StatsError::InvalidArgument(format!(
            "resamples must be >= {MIN_RESAMPLES}, got {resamples}"
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let at_or_below = (0..resamples)
        .into_par_iter()
        .filter(|&r| {
            let mut rng = rng::stream(seed, &[rng::TAG_BOOTSTRAP, r as u64]);
            let sum: f64 = (0..n).map(|_| diffs[rng.random_range(0..n)]).sum();
            sum / n as f64 <= 0.0
        })
        .count();
    Ok(PValue {
        value: (1 + at_or_below) as f64 / (resamples + 1) as f64,
        test_name: "paired-bootstrap".into(),
        sidedness: Sidedness::OneSided,
        resamples_or_df: resamples as u64,
    })
}

/// One-sided one-sample t-test of mean(d) > 0 with |d| - 1 degrees of freedom.
pub fn shard_t_test(d: &[f64]) -> Result<PValue, StatsError> {
    if d.len() < 2 {
        return Err(StatsError::TooFew { needed: 2, got: d.len() });
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::InvalidArgument("non-finite shard statistic".into()));
    }
    if d.iter().all(|v| *v == d[0]) {
        let sign = if d[0] > 0.0 {
            "positive"
        } else if d[0] < 0.0 {
            "negative"
        } else {
            "zero"
        };
        return Err(StatsError::Degenerate(format!(
            "all {} shard statistics equal {} ({sign}); zero variance",
            d.len(),
            d[0]
        )));
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = mean / (var.sqrt() / n.sqrt());
    let df = n - 1.0;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    Ok(PValue {
        value: dist.sf(t).clamp(0.0, 1.0),
        test_name: "one-sample-t".into(),
        sidedness: Sidedness::OneSided,
        resamples_or_df: df as u64,
    })
}
