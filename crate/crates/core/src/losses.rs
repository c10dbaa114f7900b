//! Training losses for the insertion heads and the image velocities.
//!
//! The count head pays a Poisson negative log-likelihood on nonzero counts
//! and a binary cross-entropy on the zero/nonzero split; the token head pays
//! a multiset cross-entropy over each gap's bag of deleted ids. The per-gap
//! terms are summed and divided by the corrupted length (1 for the empty
//! sequence). Velocities pay a dimension-averaged squared error against the
//! straight-path displacement. The hazard prefactor on the text loss is
//! deliberately not applied; it rescales the objective without moving the
//! minimizer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::CorruptionRecord;
use crate::heads::InsertionHeads;
use crate::sequence::{Element, MixedSequence};

/// Cross-entropy on an impossible bag member is clamped here and flagged
/// instead of propagating infinities.
pub const SATURATED_NEG_LOG: f64 = 690.77552789821368; // -ln(1e-300)

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("lambda must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("pi must lie strictly inside (0, 1), got {0}")]
    PiOutOfRange(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("heads cover {heads} gaps but the record has {gaps}")]
    GapMismatch { heads: usize, gaps: usize },
    #[error("record lists {images} surviving images but {velocities} velocities given")]
    VelocityMismatch { images: usize, velocities: usize },
}

/// Poisson negative log-likelihood with constants independent of the rate
/// dropped: `lambda - k ln(lambda)`.
pub fn poisson_nll(lambda: f64, k: u64) -> Result<f64, LossError> {
    if !(lambda > 0.0) {
        return Err(LossError::NonPositiveLambda(lambda));
    }
    Ok(lambda - k as f64 * lambda.ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroInflatedParts {
    /// `-ln(pi)` if the count is zero, else `-ln(1 - pi)`.
    pub bce: f64,
    /// Poisson term gated on nonzero counts.
    pub poisson: f64,
}

/// BCE on the zero indicator plus the nonzero-gated Poisson term.
///
/// Model outputs keep `pi` strictly interior; the closed endpoints are
/// accepted so exact oracle heads evaluate too, with an impossible
/// combination (e.g. `pi = 0` observed with `k = 0`) saturating like a
/// zero-mass bag member rather than producing an infinity.
pub fn zero_inflated_loss(
    pi: f64,
    lambda_nonzero: f64,
    k: u64,
) -> Result<ZeroInflatedParts, LossError> {
    if !(0.0..=1.0).contains(&pi) || !pi.is_finite() {
        return Err(LossError::PiOutOfRange(pi));
    }
    let neg_ln = |p: f64| if p > 0.0 { -p.ln() } else { SATURATED_NEG_LOG };
    if k == 0 {
        Ok(ZeroInflatedParts {
            bce: neg_ln(pi),
            poisson: 0.0,
        })
    } else {
        Ok(ZeroInflatedParts {
            bce: neg_ln(1.0 - pi),
            poisson: poisson_nll(lambda_nonzero, k)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BagCrossEntropy {
    pub value: f64,
    /// True iff some bag member had zero predicted mass and was clamped.
    pub saturated: bool,
}

/// Multiset cross-entropy `-sum_{a in bag} ln q[a]`, counting multiplicity.
pub fn bag_cross_entropy(q: &[f64], bag: &[u32]) -> BagCrossEntropy {
    let mut value = 0.0;
    let mut saturated = false;
    for &a in bag {
        let p = q[a as usize];
        if p > 0.0 {
            value -= p.ln();
        } else {
            value += SATURATED_NEG_LOG;
            saturated = true;
        }
    }
    BagCrossEntropy { value, saturated }
}

/// Per-gap contributions, stored so the total is recomputable.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GapLoss {
    pub token_ce: f64,
    pub poisson_nonzero: f64,
    pub bce_zero: f64,
}

impl GapLoss {
    pub fn total(&self) -> f64 {
        self.token_ce + self.poisson_nonzero + self.bce_zero
    }
}

/// Decomposed loss for one corrupted record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub token_ce: f64,
    pub poisson_nonzero: f64,
    pub bce_zero: f64,
    /// Per-gap sum of the three text terms, divided by `max(|x_t|, 1)`.
    pub text_total: f64,
    /// Dimension-averaged flow-matching error, averaged over surviving images.
    pub image_mse: f64,
    /// `text_total + weight_img * image_mse`.
    pub grand_total: f64,
    pub per_gap: Vec<GapLoss>,
    pub saturated: bool,
}

/// The text normalizer: the corrupted length, floored at one so the empty
/// sequence still has a finite loss.
pub fn text_normalizer(x_t_len: usize) -> f64 {
    x_t_len.max(1) as f64
}

/// Total insertion loss for one record. Gaps inside the prompt are masked
/// out of the sum; their bags are empty by construction.
pub fn text_loss(heads: &InsertionHeads, rec: &CorruptionRecord) -> Result<LossReport, LossError> {
    if heads.gap_count() != rec.gap_count() {
        return Err(LossError::GapMismatch {
            heads: heads.gap_count(),
            gaps: rec.gap_count(),
        });
    }
    let mut report = LossReport::default();
    let mut per_gap = Vec::with_capacity(rec.gap_count());
    for (gap, h) in heads.gaps.iter().enumerate() {
        if !rec.x_t.gap_is_editable(gap) {
            per_gap.push(GapLoss::default());
            continue;
        }
        let bag = &rec.bags[gap];
        let k = rec.counts[gap] as u64;
        let ce = bag_cross_entropy(&h.q, bag);
        let zi = zero_inflated_loss(h.pi, h.lambda_nonzero, k)?;
        report.saturated |= ce.saturated;
        let gl = GapLoss {
            token_ce: ce.value,
            poisson_nonzero: zi.poisson,
            bce_zero: zi.bce,
        };
        report.token_ce += gl.token_ce;
        report.poisson_nonzero += gl.poisson_nonzero;
        report.bce_zero += gl.bce_zero;
        per_gap.push(gl);
    }
    let norm = text_normalizer(rec.x_t.len());
    report.token_ce /= norm;
    report.poisson_nonzero /= norm;
    report.bce_zero /= norm;
    report.text_total = report.token_ce + report.poisson_nonzero + report.bce_zero;
    report.grand_total = report.text_total;
    report.per_gap = per_gap;
    Ok(report)
}

/// Squared error between the predicted velocity and the straight-path
/// displacement `y1 - y0`, averaged over the dimension.
pub fn flow_matching_loss(v_pred: &[f64], y0: &[f64], y1: &[f64]) -> Result<f64, LossError> {
    if v_pred.len() != y0.len() || y0.len() != y1.len() {
        return Err(LossError::DimensionMismatch(v_pred.len(), y0.len()));
    }
    let dim = v_pred.len().max(1) as f64;
    Ok(v_pred
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(v, (a, b))| (v - (b - a)).powi(2))
        .sum::<f64>()
        / dim)
}

/// Analytic gradient of [`flow_matching_loss`] in the prediction:
/// `2 (v - (y1 - y0)) / dim`.
pub fn flow_matching_loss_grad(v_pred: &[f64], y0: &[f64], y1: &[f64]) -> Vec<f64> {
    let dim = v_pred.len().max(1) as f64;
    v_pred
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(v, (a, b))| 2.0 * (v - (b - a)) / dim)
        .collect()
}

/// Full per-record loss: text terms plus the flow-matching error of each
/// surviving image (averaged over images), combined with `weight_img`.
pub fn record_loss(
    heads: &InsertionHeads,
    velocities: &[Vec<f64>],
    rec: &CorruptionRecord,
    x1: &MixedSequence,
    weight_img: f64,
) -> Result<LossReport, LossError> {
    let mut report = text_loss(heads, rec)?;
    let image_positions: Vec<usize> = (0..rec.x_t.len())
        .filter(|&i| rec.x_t.element(i).is_image() && i >= rec.x_t.prompt_len())
        .collect();
    if velocities.len() != image_positions.len() {
        return Err(LossError::VelocityMismatch {
            images: image_positions.len(),
            velocities: velocities.len(),
        });
    }
    if !image_positions.is_empty() {
        let mut total = 0.0;
        for (j, &pos) in image_positions.iter().enumerate() {
            let src = rec.alignment[pos];
            let Element::Image(data_block) = x1.element(src) else {
                return Err(LossError::VelocityMismatch {
                    images: image_positions.len(),
                    velocities: velocities.len(),
                });
            };
            total += flow_matching_loss(&velocities[j], &rec.image_noise[j], &data_block.values)?;
        }
        report.image_mse = total / image_positions.len() as f64;
    }
    report.grand_total = report.text_total + weight_img * report.image_mse;
    Ok(report)
}

/// Expected zero-inflated loss under a finite count law, the quantity the
/// brute-force consistency fitter minimizes.
pub fn expected_zero_inflated_loss(law: &[(u64, f64)], pi: f64, lambda: f64) -> f64 {
    law.iter()
        .map(|&(k, p)| {
            let parts = zero_inflated_loss(pi, lambda, k).expect("interior parameters");
            p * (parts.bce + parts.poisson)
        })
        .sum()
}

/// Brute-force population fit of the zero-inflated head to a finite count
/// law: coarse grid then golden-section refinement on each coordinate
/// (the expected loss is separable in `pi` and `lambda`).
pub fn fit_zero_inflated(law: &[(u64, f64)]) -> (f64, f64) {
    let total: f64 = law.iter().map(|&(_, p)| p).sum();
    assert!((total - 1.0).abs() < 1e-9, "count law must be normalized");
    let k_max = law.iter().map(|&(k, _)| k).max().unwrap_or(1).max(1) as f64;

    let bce = |pi: f64| expected_zero_inflated_loss(law, pi, 1.0);
    let pois = |lambda: f64| expected_zero_inflated_loss(law, 0.5, lambda);

    let pi = golden_section(&bce, 1e-9, 1.0 - 1e-9);
    let lambda = golden_section(&pois, 1e-9, 2.0 * k_max + 1.0);
    (pi, lambda)
}

/// Golden-section minimization of a unimodal function; coarse grid first to
/// bracket the basin.
fn golden_section<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> f64 {
    let grid = 256;
    let mut best = lo;
    let mut best_val = f64::INFINITY;
    for i in 0..=grid {
        let x = lo + (hi - lo) * i as f64 / grid as f64;
        let v = f(x);
        if v < best_val {
            best_val = v;
            best = x;
        }
    }
    let step = (hi - lo) / grid as f64;
    let (mut a, mut b) = ((best - step).max(lo), (best + step).min(hi));
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    while b - a > 1e-12 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if f(c) <= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::{corrupt_at, CorruptionMode};
    use crate::heads::GapHeads;
    use crate::rng::SplitRng;
    use crate::schedule::Schedule;
    use crate::sequence::Vocabulary;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn poisson_nll_values() {
        assert_eq!(poisson_nll(1.0, 0).unwrap(), 1.0);
        assert!((poisson_nll(2.0, 2).unwrap() - (2.0 - 2.0 * LN2)).abs() < 1e-12);
        assert_eq!(
            poisson_nll(0.0, 1),
            Err(LossError::NonPositiveLambda(0.0))
        );
    }

    #[test]
    fn poisson_nll_minimized_at_count() {
        // Stationarity: 1 - k/lambda = 0.
        let k = 5;
        let best = golden_section(&|l| poisson_nll(l, k).unwrap(), 1e-6, 50.0);
        assert!((best - 5.0).abs() < 1e-6, "argmin {best}");
        // Strict convexity around the minimum.
        let at = |l: f64| poisson_nll(l, k).unwrap();
        assert!(at(4.0) > at(5.0) && at(6.0) > at(5.0));
    }

    #[test]
    fn zero_inflated_values() {
        let parts = zero_inflated_loss(0.5, 10.0, 0).unwrap();
        assert!((parts.bce - LN2).abs() < 1e-12);
        assert_eq!(parts.poisson, 0.0);

        let parts = zero_inflated_loss(0.5, 3.0, 3).unwrap();
        assert!((parts.bce - LN2).abs() < 1e-12);
        assert!((parts.poisson - (3.0 - 3.0 * 3.0_f64.ln())).abs() < 1e-12);

        // Boundary values close consistently and saturate when impossible.
        assert_eq!(zero_inflated_loss(1.0, 1.0, 0).unwrap().bce, 0.0);
        assert_eq!(zero_inflated_loss(0.0, 1.0, 1).unwrap().bce, 0.0);
        assert_eq!(
            zero_inflated_loss(0.0, 1.0, 0).unwrap().bce,
            SATURATED_NEG_LOG
        );
        assert!(zero_inflated_loss(-0.1, 1.0, 0).is_err());
        assert!(zero_inflated_loss(1.5, 1.0, 0).is_err());
    }

    #[test]
    fn bag_ce_values() {
        let q = [0.2; 5];
        assert_eq!(bag_cross_entropy(&q, &[]).value, 0.0);
        let one = bag_cross_entropy(&q, &[0]);
        assert!((one.value - 5.0_f64.ln()).abs() < 1e-12);
        assert!(!one.saturated);

        let q = [0.5, 0.25, 0.125, 0.125];
        let ce = bag_cross_entropy(&q, &[0, 0, 1]);
        assert!((ce.value - (2.0 * LN2 + 4.0_f64.ln())).abs() < 1e-12);

        let q = [1.0, 0.0];
        let sat = bag_cross_entropy(&q, &[1]);
        assert!(sat.saturated);
        assert!((sat.value - SATURATED_NEG_LOG).abs() < 1e-9);
    }

    fn single_gap_record(bag: &[u32]) -> CorruptionRecord {
        // Corrupt [bag...] at t = 0 so everything lands in gap 0.
        let v = Vocabulary::new(4);
        let mut rng = SplitRng::seed_from_u64(0);
        let x1 = crate::sequence::MixedSequence::from_tokens(bag);
        corrupt_at(&x1, &v, &Schedule::Linear, CorruptionMode::TextOnly, 0.0, &mut rng)
    }

    #[test]
    fn text_loss_perfect_zero_prediction_vanishes() {
        let v = Vocabulary::new(4);
        let mut rng = SplitRng::seed_from_u64(1);
        let x1 = crate::sequence::MixedSequence::from_tokens(&[0, 1]);
        let rec = corrupt_at(&x1, &v, &Schedule::Linear, CorruptionMode::TextOnly, 1.0, &mut rng);
        let heads = InsertionHeads {
            gaps: (0..rec.gap_count())
                .map(|_| GapHeads {
                    pi: 1.0 - 1e-9,
                    lambda_nonzero: 1.0,
                    q: vec![0.2; 5],
                })
                .collect(),
        };
        let report = text_loss(&heads, &rec).unwrap();
        let n = rec.x_t.len();
        assert!(report.text_total < 1e-8 * (n + 1) as f64 / n.max(1) as f64);
    }

    #[test]
    fn text_loss_single_gap_oracle_heads() {
        // bag = {a, b}, heads (pi = eps, lambda = 2, q uniform on {a, b});
        // with the empty-sequence normalizer 1 the total is 2 + O(eps).
        let rec = single_gap_record(&[0, 1]);
        let eps = 1e-9;
        let heads = InsertionHeads {
            gaps: vec![GapHeads {
                pi: eps,
                lambda_nonzero: 2.0,
                q: vec![0.5, 0.5, 0.0, 0.0, 0.0],
            }],
        };
        let report = text_loss(&heads, &rec).unwrap();
        // CE = 2 ln 2, Poisson = 2 - 2 ln 2, BCE = -ln(1 - eps) ~ eps.
        assert!((report.token_ce - 2.0 * LN2).abs() < 1e-12);
        assert!((report.poisson_nonzero - (2.0 - 2.0 * LN2)).abs() < 1e-12);
        assert!((report.text_total - 2.0).abs() < 1e-8);
        // Recomputable from per-gap parts.
        let from_parts: f64 = report.per_gap.iter().map(GapLoss::total).sum::<f64>()
            / text_normalizer(rec.x_t.len());
        assert!((from_parts - report.text_total).abs() < 1e-12);
    }

    #[test]
    fn text_loss_shape_mismatch() {
        let rec = single_gap_record(&[0]);
        let heads = InsertionHeads { gaps: vec![] };
        assert!(matches!(
            text_loss(&heads, &rec),
            Err(LossError::GapMismatch { .. })
        ));
    }

    #[test]
    fn flow_loss_values_and_grad() {
        assert_eq!(
            flow_matching_loss(&[1.0, 2.0], &[0.0, 0.0], &[1.0, 2.0]).unwrap(),
            0.0
        );
        let loss = flow_matching_loss(&[0.0, 0.0], &[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((loss - 12.5).abs() < 1e-12);
        assert!(flow_matching_loss(&[0.0], &[0.0, 0.0], &[0.0, 0.0]).is_err());

        // Central finite differences in float64, rtol 1e-6.
        let v = [0.3, -0.7, 2.0];
        let y0 = [0.1, 0.2, -0.3];
        let y1 = [1.0, -1.0, 0.5];
        let grad = flow_matching_loss_grad(&v, &y0, &y1);
        let h = 1e-6;
        for d in 0..3 {
            let mut vp = v;
            let mut vm = v;
            vp[d] += h;
            vm[d] -= h;
            let fd = (flow_matching_loss(&vp, &y0, &y1).unwrap()
                - flow_matching_loss(&vm, &y0, &y1).unwrap())
                / (2.0 * h);
            assert!(
                (grad[d] - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "dim {d}: {} vs {}",
                grad[d],
                fd
            );
        }
    }

    #[test]
    fn zero_inflated_population_consistency() {
        // Minimizing the expected loss recovers P(k=0) and E[k | k>0].
        let laws: [&[(u64, f64)]; 3] = [
            &[(0, 0.7), (2, 0.3)],
            &[(0, 0.2), (1, 0.5), (3, 0.3)],
            &[(1, 0.25), (2, 0.5), (5, 0.25)],
        ];
        for law in laws {
            let (pi, lambda) = fit_zero_inflated(law);
            let p0: f64 = law.iter().filter(|&&(k, _)| k == 0).map(|&(_, p)| p).sum();
            let pk: f64 = 1.0 - p0;
            let mean_nonzero: f64 = law
                .iter()
                .filter(|&&(k, _)| k > 0)
                .map(|&(k, p)| k as f64 * p)
                .sum::<f64>()
                / pk;
            assert!((pi - p0).abs() < 1e-3, "pi {pi} vs {p0}");
            assert!(
                (lambda - mean_nonzero).abs() < 1e-3,
                "lambda {lambda} vs {mean_nonzero}"
            );
        }
    }

    proptest! {
        // Eq-style invariance: the bag loss is a multiset sum.
        #[test]
        fn bag_ce_is_permutation_invariant(
            mut bag in proptest::collection::vec(0u32..4, 0..6),
            swap_a in 0usize..6,
            swap_b in 0usize..6,
        ) {
            let q = [0.4, 0.3, 0.2, 0.1];
            let before = bag_cross_entropy(&q, &bag).value;
            if !bag.is_empty() {
                let a = swap_a % bag.len();
                let b = swap_b % bag.len();
                bag.swap(a, b);
            }
            let after = bag_cross_entropy(&q, &bag).value;
            prop_assert!((before - after).abs() < 1e-12);
        }
    }
}
