//! The model-output contract for insertion prediction.
//!
//! For a length-n sequence the model emits one [`GapHeads`] per gap
//! (n + 1 of them): the zero-count probability `pi`, the nonzero-count rate
//! `lambda_nonzero`, and a token distribution `q` over the vocabulary plus
//! the image token. Model outputs keep `pi` strictly interior and
//! `lambda_nonzero` strictly positive via their squashings; exact oracle
//! heads may sit on the closed boundaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HeadsError {
    #[error("gap {gap}: pi = {pi} outside [0, 1]")]
    BadPi { gap: usize, pi: f64 },
    #[error("gap {gap}: lambda_nonzero = {lambda} negative or non-finite")]
    BadLambda { gap: usize, lambda: f64 },
    #[error("gap {gap}: q sums to {sum}, expected 1 within 1e-9")]
    BadQSum { gap: usize, sum: f64 },
    #[error("gap {gap}: q has a negative entry")]
    NegativeQ { gap: usize },
    #[error("expected {expected} gaps, got {got}")]
    GapCount { expected: usize, got: usize },
}

/// Per-gap insertion prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapHeads {
    /// Probability that the missing count at this gap is zero.
    pub pi: f64,
    /// Poisson rate restricted to nonzero counts.
    pub lambda_nonzero: f64,
    /// Distribution over inserted values: ordinary tokens then the image token.
    pub q: Vec<f64>,
}

impl GapHeads {
    /// Effective scalar insertion rate `(1 - pi) * lambda_nonzero`.
    pub fn combined_rate(&self) -> f64 {
        combine_rate(self.pi, self.lambda_nonzero)
    }
}

/// Expected missing count under the zero-inflated split.
pub fn combine_rate(pi: f64, lambda_nonzero: f64) -> f64 {
    (1.0 - pi) * lambda_nonzero
}

/// One prediction set: heads for every gap of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionHeads {
    pub gaps: Vec<GapHeads>,
}

impl InsertionHeads {
    pub fn gap_count(&self) -> usize {
        self.gaps.len()
    }

    pub fn validate(&self, expected_gaps: usize, head_width: usize) -> Result<(), HeadsError> {
        if self.gaps.len() != expected_gaps {
            return Err(HeadsError::GapCount {
                expected: expected_gaps,
                got: self.gaps.len(),
            });
        }
        for (gap, h) in self.gaps.iter().enumerate() {
            if !(0.0..=1.0).contains(&h.pi) || !h.pi.is_finite() {
                return Err(HeadsError::BadPi { gap, pi: h.pi });
            }
            if h.lambda_nonzero < 0.0 || !h.lambda_nonzero.is_finite() {
                return Err(HeadsError::BadLambda {
                    gap,
                    lambda: h.lambda_nonzero,
                });
            }
            if h.q.len() != head_width {
                return Err(HeadsError::BadQSum {
                    gap,
                    sum: f64::NAN,
                });
            }
            if h.q.iter().any(|&p| p < 0.0) {
                return Err(HeadsError::NegativeQ { gap });
            }
            let sum: f64 = h.q.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(HeadsError::BadQSum { gap, sum });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_rate_values() {
        assert_eq!(combine_rate(0.5, 4.0), 2.0);
        // Certain zero kills the rate.
        assert!(combine_rate(1.0 - 1e-12, 3.0) < 1e-11);
        assert_eq!(combine_rate(1.0, 7.0), 0.0);
    }

    #[test]
    fn validate_catches_bad_heads() {
        let good = InsertionHeads {
            gaps: vec![GapHeads {
                pi: 0.5,
                lambda_nonzero: 1.0,
                q: vec![0.25; 4],
            }],
        };
        assert!(good.validate(1, 4).is_ok());
        assert_eq!(
            good.validate(2, 4),
            Err(HeadsError::GapCount {
                expected: 2,
                got: 1
            })
        );

        let mut bad = good.clone();
        bad.gaps[0].pi = 1.5;
        assert!(matches!(bad.validate(1, 4), Err(HeadsError::BadPi { .. })));

        let mut bad = good.clone();
        bad.gaps[0].q = vec![0.5, 0.5, 0.1, -0.1];
        assert!(matches!(bad.validate(1, 4), Err(HeadsError::NegativeQ { .. })));

        let mut bad = good;
        bad.gaps[0].q = vec![0.3, 0.3, 0.3, 0.3];
        assert!(matches!(bad.validate(1, 4), Err(HeadsError::BadQSum { .. })));
    }
}
