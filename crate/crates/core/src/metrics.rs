//! Statistical acceptance machinery: KS statistics, total variation,
//! binomial bounds, and the self-describing [`MetricReport`] record.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One-sample Kolmogorov-Smirnov statistic against a CDF.
/// Sorts `samples` in place.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> f64 {
    assert!(!samples.is_empty(), "ks_statistic: empty sample");
    samples.sort_by(|a, b| a.partial_cmp(b).expect("NaN in KS sample"));
    let n = samples.len() as f64;
    let mut stat: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        stat = stat.max((f - lo).abs()).max((hi - f).abs());
    }
    stat
}

/// Asymptotic one-sample KS critical value at significance `alpha`:
/// `sqrt(-ln(alpha/2) / 2) / sqrt(n)`.
pub fn ks_critical_value(alpha: f64, n: usize) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Total variation distance between two discrete distributions keyed by `K`.
/// Inputs are unnormalized non-negative weights; each side is normalized by
/// its own total. Empty support on one side counts fully against the other.
pub fn tv_distance<K: Ord + Clone>(p: &BTreeMap<K, f64>, q: &BTreeMap<K, f64>) -> f64 {
    let zp: f64 = p.values().sum();
    let zq: f64 = q.values().sum();
    assert!(zp > 0.0 && zq > 0.0, "tv_distance: empty distribution");
    let mut keys: Vec<K> = p.keys().cloned().collect();
    keys.extend(q.keys().cloned());
    keys.sort();
    keys.dedup();
    0.5 * keys
        .iter()
        .map(|k| {
            let a = p.get(k).copied().unwrap_or(0.0) / zp;
            let b = q.get(k).copied().unwrap_or(0.0) / zq;
            (a - b).abs()
        })
        .sum::<f64>()
}

/// 3σ half-width for an empirical frequency of a Bernoulli(p) over n draws.
pub fn binomial_3sigma(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

/// A self-describing pass/fail record emitted by validation commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    /// The measured statistic (e.g. a KS statistic or an absolute deviation).
    pub value: f64,
    /// The bound `value` must stay within for a pass.
    pub tolerance: f64,
    pub pass: bool,
    pub sample_size: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn from_bound(name: &str, value: f64, tolerance: f64, sample_size: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            value,
            tolerance,
            pass: value <= tolerance,
            sample_size,
            seed,
        }
    }
}
