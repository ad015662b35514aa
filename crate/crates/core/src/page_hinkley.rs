//! Page-Hinkley change detection on the smoothed mini-batch loss, and the
//! checkpoint used to backtrack when it fires.
//!
//! Only increases of the loss are monitored. Each observation updates, in order:
//!
//! ```text
//! t    <- t + 1
//! l    <- rho * loss + (1 - rho) * l
//! lbar <- (l + t * lbar) / (t + 1)
//! L    <- L + (l - lbar)
//! Lmin <- min(Lmin, L)
//! ```
//!
//! and the test fires when `L - Lmin > delta`. All accumulators start at zero,
//! including `lbar`, so the first observation already contributes `l / 2` to
//! the gap.

use serde::{Deserialize, Serialize};

use crate::vecmath::FlatVector;
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Ok,
    /// The cumulated deviation exceeded the threshold.
    Triggered,
    /// The loss was NaN or infinite; handled as a trigger.
    NonFinite,
}

impl Verdict {
    pub fn is_triggered(self) -> bool {
        !matches!(self, Verdict::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PHState {
    /// Observations since the last (re)initialization.
    pub t: u64,
    /// Smoothed mini-batch loss.
    pub smoothed: f64,
    /// Running mean of `smoothed`.
    pub mean: f64,
    /// Cumulated deviation of `smoothed` from `mean`.
    pub cumulated: f64,
    pub cumulated_min: f64,
    pub delta: f64,
    /// Verdicts are suppressed for the first `warmup` observations after each
    /// (re)initialization. During that window `mean` tracks `smoothed` and the
    /// deviation sums stay at zero. Zero disables it.
    pub warmup: u64,
}

impl PHState {
    /// A fresh detector with an explicit threshold.
    pub fn with_delta(delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::Parameter(format!("threshold must be positive, got {delta}")));
        }
        Ok(Self {
            t: 0,
            smoothed: 0.0,
            mean: 0.0,
            cumulated: 0.0,
            cumulated_min: 0.0,
            delta,
            warmup: 0,
        })
    }

    pub fn with_warmup(mut self, warmup: u64) -> Self {
        self.warmup = warmup;
        self
    }

    /// Current `L - Lmin`.
    pub fn gap(&self) -> f64 {
        self.cumulated - self.cumulated_min
    }

    pub fn observe(&mut self, batch_loss: f64, rho: f64) -> Verdict {
        if !batch_loss.is_finite() {
            return Verdict::NonFinite;
        }
        self.t += 1;
        self.smoothed = rho * batch_loss + (1.0 - rho) * self.smoothed;
        if self.t <= self.warmup {
            self.mean = self.smoothed;
            self.cumulated = 0.0;
            self.cumulated_min = 0.0;
            return Verdict::Ok;
        }
        let n = (self.t - self.warmup) as f64;
        self.mean = (self.smoothed + n * self.mean) / (n + 1.0);
        self.cumulated += self.smoothed - self.mean;
        self.cumulated_min = self.cumulated_min.min(self.cumulated);
        if !self.smoothed.is_finite() {
            return Verdict::NonFinite;
        }
        if self.gap() > self.delta {
            Verdict::Triggered
        } else {
            Verdict::Ok
        }
    }

    /// Zeroes every accumulator and the local counter; keeps the threshold.
    pub fn reset(&mut self) {
        self.t = 0;
        self.smoothed = 0.0;
        self.mean = 0.0;
        self.cumulated = 0.0;
        self.cumulated_min = 0.0;
    }
}

/// Threshold from the first mini-batch loss: `delta = loss / lambda`.
pub fn ph_init(first_batch_loss: f64, lambda: f64) -> Result<PHState> {
    if !(first_batch_loss > 0.0) || !first_batch_loss.is_finite() {
        return Err(Error::Parameter(format!(
            "first mini-batch loss must be positive and finite, got {first_batch_loss}"
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::Parameter(format!("threshold divisor must be positive, got {lambda}")));
    }
    PHState::with_delta(first_batch_loss / lambda)
}

pub fn ph_observe(state: &mut PHState, batch_loss: f64, rho: f64) -> Verdict {
    state.observe(batch_loss, rho)
}

pub fn ph_reset(state: &mut PHState) {
    state.reset();
}

/// The single rollback slot: the parameters before the last accepted update.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    saved: FlatVector,
}

impl Checkpoint {
    /// Seeds the slot with the initial parameters so a trigger before any
    /// accepted step restores them.
    pub fn new(initial: &FlatVector) -> Self {
        Self {
            saved: initial.clone(),
        }
    }

    pub fn save(&mut self, theta: &[f64]) {
        self.saved.copy_from_slice(theta);
    }

    pub fn saved(&self) -> &FlatVector {
        &self.saved
    }
}

/// Restores the checkpointed parameters and halves every rate in `rates`.
pub fn backtrack(theta: &mut [f64], checkpoint: &Checkpoint, rates: &mut [f64]) {
    theta.copy_from_slice(&checkpoint.saved);
    for eta in rates {
        *eta *= 0.5;
    }
}
