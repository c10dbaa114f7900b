//! Seeded, splittable random number generation.
//!
//! Every stochastic operation in this crate threads a [`SplitRng`] explicitly;
//! there is no global RNG state. Parallel workloads derive one child stream
//! per work item with [`SplitRng::split`] *before* fanning out, so results are
//! identical regardless of worker count.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A deterministic RNG stream that can spawn independent child streams.
#[derive(Debug, Clone)]
pub struct SplitRng {
    inner: ChaCha8Rng,
}

impl SplitRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent child stream. Advances this stream by one draw,
    /// so successive splits yield distinct children.
    pub fn split(&mut self) -> Self {
        Self::seed_from_u64(self.inner.next_u64())
    }

    /// Derive `n` child streams in order, e.g. one per parallel work item.
    pub fn split_n(&mut self, n: usize) -> Vec<Self> {
        (0..n).map(|_| self.split()).collect()
    }

    /// Uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::gen::<f64>(&mut self.inner)
    }

    /// Uniform draw on [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        rand::Rng::sample(&mut self.inner, rand_distr::StandardNormal)
    }

    pub fn normal_vec(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.normal()).collect()
    }

    /// Index draw from unnormalized non-negative weights by CDF inversion.
    /// Panics if the total weight is not positive and finite.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(
            total > 0.0 && total.is_finite(),
            "weighted_index: total weight must be positive and finite, got {total}"
        );
        let target = self.uniform() * total;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        // Float slack: fall back to the last positively weighted index.
        weights
            .iter()
            .rposition(|&w| w > 0.0)
            .expect("weighted_index: no positive weight")
    }

    pub fn gen_range_usize(&mut self, bound: usize) -> usize {
        rand::Rng::gen_range(&mut self.inner, 0..bound)
    }
}

impl RngCore for SplitRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SplitRng::seed_from_u64(7);
        let mut b = SplitRng::seed_from_u64(7);
        for _ in 0..32 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_streams_differ_from_parent_and_each_other() {
        let mut parent = SplitRng::seed_from_u64(7);
        let mut c1 = parent.split();
        let mut c2 = parent.split();
        let a: Vec<u64> = (0..8).map(|_| c1.next_u64()).collect();
        let b: Vec<u64> = (0..8).map(|_| c2.next_u64()).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn weighted_index_respects_weights() {
        let mut rng = SplitRng::seed_from_u64(1);
        let weights = [0.0, 3.0, 1.0];
        let mut counts = [0usize; 3];
        let n = 40_000;
        for _ in 0..n {
            counts[rng.weighted_index(&weights)] += 1;
        }
        assert_eq!(counts[0], 0);
        let frac1 = counts[1] as f64 / n as f64;
        // 3σ binomial bound around 0.75.
        assert!((frac1 - 0.75).abs() < 3.0 * (0.75f64 * 0.25 / n as f64).sqrt());
    }

    #[test]
    fn uniform_in_bounds() {
        let mut rng = SplitRng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = rng.uniform_in(-1.0, 2.0);
            assert!((-1.0..2.0).contains(&x));
        }
    }
}
