//! Corruption schedules and the interleaved time machinery.
//!
//! A [`Schedule`] is a strictly increasing map of `[0, 1]` onto itself giving
//! the probability that a data token is still present at time `t`. The same
//! function, read as a CDF, is the law of insertion times during generation,
//! so its hazard `deriv / (1 - retention)` drives the sampler and its inverse
//! drives the lagged per-image clocks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitRng;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("hazard is undefined at t = 1")]
    HazardAtOne,
    #[error("retention level {0} outside [0, 1]")]
    LevelOutOfRange(f64),
    #[error("polynomial exponent must be positive and finite, got {0}")]
    BadExponent(f64),
}

/// Monotone corruption schedule with closed-form derivative and inverse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `retention(t) = t`. The default; also the identity inverse.
    Linear,
    /// `retention(t) = t^exponent` for a positive exponent.
    #[serde(rename = "poly")]
    Polynomial { exponent: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Linear
    }
}

fn check_unit(t: f64) -> Result<(), ScheduleError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(ScheduleError::TimeOutOfRange(t));
    }
    Ok(())
}

impl Schedule {
    pub fn polynomial(exponent: f64) -> Result<Self, ScheduleError> {
        if !(exponent > 0.0) || !exponent.is_finite() {
            return Err(ScheduleError::BadExponent(exponent));
        }
        Ok(Schedule::Polynomial { exponent })
    }

    /// Probability that a data token survives corruption at time `t`.
    /// Exactly 0 at `t = 0` and 1 at `t = 1`.
    pub fn retention(&self, t: f64) -> Result<f64, ScheduleError> {
        check_unit(t)?;
        Ok(match self {
            Schedule::Linear => t,
            Schedule::Polynomial { exponent } => t.powf(*exponent),
        })
    }

    /// Derivative of [`Schedule::retention`].
    pub fn deriv(&self, t: f64) -> Result<f64, ScheduleError> {
        check_unit(t)?;
        Ok(match self {
            Schedule::Linear => 1.0,
            Schedule::Polynomial { exponent } => exponent * t.powf(exponent - 1.0),
        })
    }

    /// Insertion hazard `deriv(t) / (1 - retention(t))`. Diverges as `t -> 1`;
    /// callers cap their step so the hazard is never evaluated at 1.
    pub fn hazard(&self, t: f64) -> Result<f64, ScheduleError> {
        check_unit(t)?;
        if t >= 1.0 {
            return Err(ScheduleError::HazardAtOne);
        }
        Ok(self.deriv(t)? / (1.0 - self.retention(t)?))
    }

    /// Closed-form inverse: `inverse(retention(t)) = t` to within 1e-12.
    pub fn inverse(&self, level: f64) -> Result<f64, ScheduleError> {
        if !(0.0..=1.0).contains(&level) {
            return Err(ScheduleError::LevelOutOfRange(level));
        }
        Ok(match self {
            Schedule::Linear => level,
            Schedule::Polynomial { exponent } => level.powf(1.0 / exponent),
        })
    }

    /// Draw an insertion time, i.e. `inverse(u)` with `u ~ Uniform(0, 1)`.
    /// The schedule itself is the CDF of this draw.
    pub fn sample_insertion_time(&self, rng: &mut SplitRng) -> f64 {
        self.inverse(rng.uniform()).expect("uniform draw is in [0, 1)")
    }

    /// Draw a per-image lagged clock `tau_img = tau_text - inverse(u)`.
    ///
    /// `tau_text` runs over the extended interval `[0, 2]`; the result lies in
    /// `[tau_text - 1, tau_text]`, and negative values mean the image has not
    /// been inserted yet.
    pub fn sample_interleaved_time(
        &self,
        tau_text: f64,
        rng: &mut SplitRng,
    ) -> Result<ExtendedTime, ScheduleError> {
        if !(0.0..=2.0).contains(&tau_text) {
            return Err(ScheduleError::TimeOutOfRange(tau_text));
        }
        Ok(ExtendedTime::new(tau_text - self.sample_insertion_time(rng)))
    }
}

/// Two independent Uniform(0, 1) clocks, used only in fixed-image-count mode.
pub fn sample_independent_times(rng: &mut SplitRng) -> (f64, f64) {
    let t_text = rng.uniform();
    let t_img = rng.uniform();
    (t_text, t_img)
}

/// A clock value on the extended training interval.
///
/// `tau` lives in `[-1, 2]`; the clipped value is what the generative process
/// actually sees. Negative `tau` means "not yet inserted".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExtendedTime {
    tau: f64,
}

impl ExtendedTime {
    pub fn new(tau: f64) -> Self {
        assert!(
            (-1.0..=2.0).contains(&tau),
            "extended time {tau} outside [-1, 2]"
        );
        Self { tau }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `min(1, max(0, tau))`.
    pub fn clipped(&self) -> f64 {
        self.tau.clamp(0.0, 1.0)
    }
}
