//! Training-time forward corruption.
//!
//! Tokens are deleted independently with probability `1 - retention(t_text)`;
//! deleted ids land in the bag of the gap between their surviving neighbours.
//! Under the interleaved mode each image draws a lagged clock
//! `tau_img = tau_text - inverse(u)`: a negative clock deletes the image (its
//! id joins the enclosing bag), a non-negative one keeps it, noised at the
//! clipped time along the straight path between fresh noise and the data
//! block. The prompt prefix is never touched.

use serde::{Deserialize, Serialize};

use crate::rng::SplitRng;
use crate::schedule::{ExtendedTime, Schedule};
use crate::sequence::{Element, ImageBlock, MixedSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// One extended text clock on [0, 2]; images get lagged clocks and may be
    /// deleted. The full joint training process.
    Interleaved,
    /// Text clock and per-image clocks drawn independently on [0, 1]; images
    /// are never deleted. Only valid when the image count is fixed by data.
    Independent,
    /// Tokens only; any image present is left untouched.
    TextOnly,
}

/// Outcome of the lagged-clock draw for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImageFate {
    Deleted,
    Survives { t_img: f64 },
}

/// `tau_img = tau_text - inverse(u)`; deleted iff negative, else clipped.
pub fn deletion_time_of_image(
    schedule: &Schedule,
    tau_text: f64,
    rng: &mut SplitRng,
) -> ImageFate {
    let tau_img = schedule
        .sample_interleaved_time(tau_text, rng)
        .expect("tau_text in [0, 2]");
    if tau_img.tau() < 0.0 {
        ImageFate::Deleted
    } else {
        ImageFate::Survives {
            t_img: tau_img.clipped(),
        }
    }
}

/// One corrupted training example: the surviving sequence plus everything
/// needed to state the training losses exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub x_t: MixedSequence,
    /// Per gap of `x_t`, the deleted ids in source order (a multiset as far
    /// as any loss is concerned; order is kept only so reconstruction tests
    /// can be exact). Deleted images appear as the image token id.
    pub bags: Vec<Vec<u32>>,
    /// `counts[i] == bags[i].len()`, the regression target for gap `i`.
    pub counts: Vec<usize>,
    pub tau_text: ExtendedTime,
    /// Lagged clocks of surviving images, in `x_t` order.
    pub image_times: Vec<ExtendedTime>,
    /// The fresh noise draw used to corrupt each surviving image, in `x_t`
    /// order; the flow-matching target is `data - noise`.
    pub image_noise: Vec<Vec<f64>>,
    /// Surviving-element index in `x_t` -> source index in the data sequence.
    pub alignment: Vec<usize>,
}

impl CorruptionRecord {
    pub fn gap_count(&self) -> usize {
        self.x_t.gap_count()
    }

    /// Clipped text time, the argument to all schedule evaluations.
    pub fn t_text(&self) -> f64 {
        self.tau_text.clipped()
    }

    /// Total deleted count plus survivors; equals the source length.
    pub fn source_len(&self) -> usize {
        self.x_t.len() + self.counts.iter().sum::<usize>()
    }

    /// Interleave bags with survivors to recover the source id sequence.
    pub fn reconstruct_skeleton(&self, vocab: &Vocabulary) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.source_len());
        for gap in 0..self.gap_count() {
            out.extend_from_slice(&self.bags[gap]);
            if gap < self.x_t.len() {
                out.push(self.x_t.element(gap).id(vocab));
            }
        }
        out
    }
}

/// Corrupt with a freshly drawn clock: `tau_text ~ Uniform(0, 2)` in
/// interleaved mode, `t ~ Uniform(0, 1)` otherwise.
pub fn corrupt(
    x1: &MixedSequence,
    vocab: &Vocabulary,
    schedule: &Schedule,
    mode: CorruptionMode,
    rng: &mut SplitRng,
) -> CorruptionRecord {
    let tau_text = match mode {
        CorruptionMode::Interleaved => rng.uniform_in(0.0, 2.0),
        CorruptionMode::Independent | CorruptionMode::TextOnly => rng.uniform(),
    };
    corrupt_at(x1, vocab, schedule, mode, tau_text, rng)
}

/// Corrupt at a fixed text clock. `tau_text` must lie in [0, 2] for the
/// interleaved mode and in [0, 1] otherwise.
pub fn corrupt_at(
    x1: &MixedSequence,
    vocab: &Vocabulary,
    schedule: &Schedule,
    mode: CorruptionMode,
    tau_text: f64,
    rng: &mut SplitRng,
) -> CorruptionRecord {
    let max_tau = if mode == CorruptionMode::Interleaved { 2.0 } else { 1.0 };
    assert!(
        (0.0..=max_tau).contains(&tau_text),
        "tau_text {tau_text} out of range for {mode:?}"
    );
    let t_text = tau_text.min(1.0);
    let keep_p = schedule.retention(t_text).expect("t_text in [0, 1]");

    let mut survivors: Vec<Element> = Vec::with_capacity(x1.len());
    let mut deleted: Vec<(usize, u32)> = Vec::new(); // (gap, id)
    let mut image_times = Vec::new();
    let mut image_noise = Vec::new();
    let mut alignment = Vec::new();

    for (src, element) in x1.elements().iter().enumerate() {
        let in_prompt = src < x1.prompt_len();
        match element {
            Element::Token(id) => {
                if in_prompt || rng.bernoulli(keep_p) {
                    survivors.push(Element::Token(*id));
                    alignment.push(src);
                } else {
                    deleted.push((survivors.len(), *id));
                }
            }
            Element::Image(block) => {
                if in_prompt {
                    survivors.push(Element::Image(block.clone()));
                    alignment.push(src);
                    continue;
                }
                match mode {
                    CorruptionMode::TextOnly => {
                        survivors.push(Element::Image(block.clone()));
                        alignment.push(src);
                    }
                    CorruptionMode::Independent => {
                        let t_img = rng.uniform();
                        push_noised_image(
                            block,
                            t_img,
                            t_img,
                            src,
                            rng,
                            &mut survivors,
                            &mut image_times,
                            &mut image_noise,
                            &mut alignment,
                        );
                    }
                    CorruptionMode::Interleaved => {
                        match deletion_time_of_image(schedule, tau_text, rng) {
                            ImageFate::Deleted => {
                                deleted.push((survivors.len(), vocab.image_token_id()));
                            }
                            ImageFate::Survives { t_img } => {
                                push_noised_image(
                                    block,
                                    t_img,
                                    t_img,
                                    src,
                                    rng,
                                    &mut survivors,
                                    &mut image_times,
                                    &mut image_noise,
                                    &mut alignment,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    let gap_count = survivors.len() + 1;
    let mut bags: Vec<Vec<u32>> = vec![Vec::new(); gap_count];
    for (gap, id) in deleted {
        bags[gap].push(id);
    }
    let counts = bags.iter().map(Vec::len).collect();

    let x_t = MixedSequence::new(survivors, x1.prompt_len()).expect("prompt survives intact");
    CorruptionRecord {
        x_t,
        bags,
        counts,
        tau_text: ExtendedTime::new(tau_text.min(2.0)),
        image_times,
        image_noise,
        alignment,
    }
}

#[allow(clippy::too_many_arguments)]
fn push_noised_image(
    block: &ImageBlock,
    t_img: f64,
    time: f64,
    src: usize,
    rng: &mut SplitRng,
    survivors: &mut Vec<Element>,
    image_times: &mut Vec<ExtendedTime>,
    image_noise: &mut Vec<Vec<f64>>,
    alignment: &mut Vec<usize>,
) {
    let noise = rng.normal_vec(block.values.len());
    let values: Vec<f64> = block
        .values
        .iter()
        .zip(&noise)
        .map(|(y1, y0)| t_img * y1 + (1.0 - t_img) * y0)
        .collect();
    let time = ExtendedTime::new(time);
    survivors.push(Element::Image(ImageBlock { values, time }));
    image_times.push(time);
    image_noise.push(noise);
    alignment.push(src);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::binomial_3sigma;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(8)
    }

    #[test]
    fn everything_deleted_at_time_zero() {
        let v = vocab();
        let mut rng = SplitRng::seed_from_u64(0);
        let x1 = MixedSequence::from_tokens(&[0, 1]);
        let rec = corrupt_at(&x1, &v, &Schedule::Linear, CorruptionMode::TextOnly, 0.0, &mut rng);
        assert!(rec.x_t.is_empty());
        assert_eq!(rec.bags, vec![vec![0, 1]]);
        assert_eq!(rec.counts, vec![2]);
        assert!(rec.alignment.is_empty());
    }

    #[test]
    fn nothing_deleted_at_time_one() {
        let v = vocab();
        let mut rng = SplitRng::seed_from_u64(0);
        let x1 = MixedSequence::from_tokens(&[0, 1]);
        let rec = corrupt_at(&x1, &v, &Schedule::Linear, CorruptionMode::TextOnly, 1.0, &mut rng);
        assert_eq!(rec.x_t, x1);
        assert!(rec.bags.iter().all(Vec::is_empty));
        assert_eq!(rec.alignment, vec![0, 1]);
    }

    #[test]
    fn marginal_survival_matches_retention() {
        let v = vocab();
        let mut rng = SplitRng::seed_from_u64(1);
        let x1 = MixedSequence::from_tokens(&[0, 1, 2]);
        let n = 100_000;
        let mut kept = [0usize; 3];
        for _ in 0..n {
            let rec =
                corrupt_at(&x1, &v, &Schedule::Linear, CorruptionMode::TextOnly, 0.5, &mut rng);
            for &src in &rec.alignment {
                kept[src] += 1;
            }
        }
        for (src, &k) in kept.iter().enumerate() {
            let frac = k as f64 / n as f64;
            assert!(
                (frac - 0.5).abs() < binomial_3sigma(0.5, n),
                "token {src}: {frac}"
            );
        }
    }

    #[test]
    fn retention_law_over_uniform_times() {
        // With the linear schedule, half the sequence survives on average.
        let v = vocab();
        let mut rng = SplitRng::seed_from_u64(2);
        let x1 = MixedSequence::from_tokens(&[0, 1, 2, 3]);
        let n = 100_000;
        let mut total = 0.0;
        for _ in 0..n {
            let rec = corrupt(&x1, &v, &Schedule::Linear, CorruptionMode::TextOnly, &mut rng);
            total += rec.x_t.len() as f64 / x1.len() as f64;
        }
        let mean = total / n as f64;
        // Per-record variance is 1/(6L) + 1/12; 3σ of the mean is well under 0.005.
        assert!((mean - 0.5).abs() < 0.005, "mean retained fraction {mean}");
    }

    #[test]
    fn image_fate_edges() {
        let mut rng = SplitRng::seed_from_u64(3);
        let s = Schedule::Linear;
        for _ in 0..200 {
            // tau_text = 0: the offset is positive almost surely.
            assert_eq!(deletion_time_of_image(&s, 0.0, &mut rng), ImageFate::Deleted);
            // tau_text = 2: tau_img >= 1 always.
            assert_eq!(
                deletion_time_of_image(&s, 2.0, &mut rng),
                ImageFate::Survives { t_img: 1.0 }
            );
        }
        let n = 100_000;
        let deleted = (0..n)
            .filter(|_| deletion_time_of_image(&s, 0.5, &mut rng) == ImageFate::Deleted)
            .count();
        let frac = deleted as f64 / n as f64;
        assert!((frac - 0.5).abs() < binomial_3sigma(0.5, n), "{frac}");
    }

    #[test]
    fn prompt_is_never_corrupted() {
        let v = vocab();
        let mut rng = SplitRng::seed_from_u64(4);
        let x1 = MixedSequence::from_prompt_and_target(
            &[5, 6],
            vec![Element::Token(0), Element::Token(1)],
        );
        for _ in 0..500 {
            let rec = corrupt(&x1, &v, &Schedule::Linear, CorruptionMode::Interleaved, &mut rng);
            assert_eq!(rec.x_t.element(0).id(&v), 5);
            assert_eq!(rec.x_t.element(1).id(&v), 6);
            assert_eq!(rec.x_t.prompt_len(), 2);
            // Bags strictly before the end of the prompt stay empty.
            assert!(rec.bags[0].is_empty());
            assert!(rec.bags[1].is_empty());
        }
    }

    #[test]
    fn independent_mode_keeps_images() {
        let v = vocab();
        let mut rng = SplitRng::seed_from_u64(5);
        let x1 = MixedSequence::new(
            vec![
                Element::Token(0),
                Element::Image(ImageBlock::clean(vec![3.0, -1.0])),
            ],
            0,
        )
        .unwrap();
        for _ in 0..500 {
            let rec = corrupt(&x1, &v, &Schedule::Linear, CorruptionMode::Independent, &mut rng);
            let images: Vec<_> = rec.x_t.elements().iter().filter(|e| e.is_image()).collect();
            assert_eq!(images.len(), 1);
            assert_eq!(rec.image_times.len(), 1);
            assert_eq!(rec.image_noise.len(), 1);
            let t = rec.image_times[0].clipped();
            assert!((0.0..=1.0).contains(&t));
        }
    }

    #[test]
    fn interleaved_image_noising_is_on_the_straight_path() {
        let v = vocab();
        let mut rng = SplitRng::seed_from_u64(6);
        let y1 = vec![2.0, -4.0];
        let x1 =
            MixedSequence::new(vec![Element::Image(ImageBlock::clean(y1.clone()))], 0).unwrap();
        let mut survived = 0;
        let n = 2000;
        for _ in 0..n {
            let rec = corrupt(&x1, &v, &Schedule::Linear, CorruptionMode::Interleaved, &mut rng);
            if rec.x_t.is_empty() {
                assert_eq!(rec.bags[0], vec![v.image_token_id()]);
                continue;
            }
            survived += 1;
            let Element::Image(block) = rec.x_t.element(0) else {
                panic!("expected image")
            };
            let t = rec.image_times[0].clipped();
            for d in 0..2 {
                let expect = t * y1[d] + (1.0 - t) * rec.image_noise[0][d];
                assert!((block.values[d] - expect).abs() < 1e-12);
            }
        }
        // tau_text ~ U(0,2) makes survival probability E[retention(min(1, tau))] = 3/4.
        let frac = survived as f64 / n as f64;
        assert!((frac - 0.75).abs() < binomial_3sigma(0.75, n) + 0.01, "{frac}");
    }

    proptest! {
        // Interleaving bags with survivors recovers the exact source skeleton,
        // and the alignment points at value-identical source elements.
        #[test]
        fn reconstruction_is_exact(
            ids in proptest::collection::vec(0u32..8, 0..10),
            prompt_len in 0usize..4,
            tau in 0.0f64..=1.0,
            seed in 0u64..5000,
        ) {
            let v = vocab();
            let prompt_len = prompt_len.min(ids.len());
            let x1 = MixedSequence::new(
                ids.iter().map(|&i| Element::Token(i)).collect(),
                prompt_len,
            ).unwrap();
            let mut rng = SplitRng::seed_from_u64(seed);
            let rec = corrupt_at(&x1, &v, &Schedule::Linear, CorruptionMode::TextOnly, tau, &mut rng);
            prop_assert_eq!(rec.reconstruct_skeleton(&v), x1.id_skeleton(&v));
            prop_assert_eq!(rec.source_len(), x1.len());
            for (xi, &src) in rec.alignment.iter().enumerate() {
                prop_assert_eq!(rec.x_t.element(xi), x1.element(src));
            }
            for (gap, bag) in rec.bags.iter().enumerate() {
                prop_assert_eq!(rec.counts[gap], bag.len());
            }
        }

        // Every deleted token's bag index equals the number of surviving
        // elements strictly to its left in the source sequence.
        #[test]
        fn bag_positions_are_correct(
            ids in proptest::collection::vec(0u32..8, 1..10),
            seed in 0u64..5000,
        ) {
            let v = vocab();
            let x1 = MixedSequence::from_tokens(&ids);
            let mut rng = SplitRng::seed_from_u64(seed);
            let rec = corrupt_at(&x1, &v, &Schedule::Linear, CorruptionMode::TextOnly, 0.4, &mut rng);
            let surviving = rec.alignment.clone();
            let deleted_total: usize = rec.counts.iter().sum();
            prop_assert_eq!(deleted_total + surviving.len(), ids.len());
            let deleted: Vec<usize> =
                (0..ids.len()).filter(|s| !surviving.contains(s)).collect();
            let mut remaining: Vec<Vec<u32>> = rec.bags.clone();
            for &src in &deleted {
                let expected_gap = surviving.iter().filter(|&&p| p < src).count();
                let pos = remaining[expected_gap]
                    .iter()
                    .position(|&id| id == ids[src]);
                prop_assert!(pos.is_some(), "token {} missing from gap {}", src, expected_gap);
                remaining[expected_gap].remove(pos.unwrap());
            }
            prop_assert!(remaining.iter().all(Vec::is_empty));
        }
    }
}
