//! Moments of the random reference path and the agnostic learning-rate rules.
//!
//! The reference path is `r_0 = 0`, `r_t = alpha * u_t + (1 - alpha) * r_{t-1}`
//! with `u_t` i.i.d. uniform unit vectors. A gradient path `p_t` built the same
//! way from normalized gradients is compared against the asymptotic mean and
//! standard deviation of `|r_t|^2`: when `|p_t|^2` sits above the reference
//! mean, successive gradients agree and the learning rate grows; below it,
//! they disagree and the rate shrinks.

use serde::{Deserialize, Serialize};

use crate::vecmath::{norm_sq, update_path_in_place, FlatVector};
use crate::{Error, Result};

fn check_weight(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!("memory rate must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_open_weight(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("memory rate must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::Parameter("dimension must be at least 1".into()));
    }
    Ok(())
}

/// `E|r_t|^2 = alpha / (2 - alpha) * (1 - (1 - alpha)^(2t))`.
///
/// Evaluated as the geometric sum `alpha^2 * (1 - q^t) / (1 - q)` with
/// `q = (1 - alpha)^2`, which is the same quantity and returns `alpha^2`
/// exactly at `t = 1`.
pub fn mean_t(alpha: f64, t: u64) -> Result<f64> {
    check_weight(alpha)?;
    if t == 0 {
        return Ok(0.0);
    }
    let q = (1.0 - alpha) * (1.0 - alpha);
    let qt = powu(q, t);
    Ok(alpha * alpha * ((1.0 - qt) / (1.0 - q)))
}

/// Closed-form `Var |r_t|^2` in the reference form
/// `(1/d) * 2 a^2 (1-a)^2 / ((2-a)^2 ((1-a)^2 + 1)) * [1 - (1-a)^t] [1 - (1-a)^(t-1)]`.
///
/// This is the quantity the agnostic update normalizes by (through its
/// `t -> infinity` limit). It does not match the simulated variance of
/// `|r_t|^2`; see [`var_t_exact`] for the exact second moment.
pub fn var_t(alpha: f64, d: usize, t: u64) -> Result<f64> {
    check_open_weight(alpha)?;
    check_dim(d)?;
    if t == 0 {
        return Ok(0.0);
    }
    let keep = 1.0 - alpha;
    let scale = asymptotic_var_scale(alpha) / d as f64;
    Ok(scale * (1.0 - powu(keep, t)) * (1.0 - powu(keep, t - 1)))
}

/// Exact `Var |r_t|^2 = (2 a^4 / d) * (S2^2 - S4)` where
/// `S2 = sum_{j<t} q^j`, `S4 = sum_{j<t} q^(2j)` and `q = (1-a)^2`.
///
/// Follows from `|r_t|^2 = a^2 (sum w_l^2 + sum_{l != k} w_l w_k <u_l, u_k>)`
/// with the pairwise inner products centered, mutually uncorrelated and of
/// variance `1/d`.
pub fn var_t_exact(alpha: f64, d: usize, t: u64) -> Result<f64> {
    check_open_weight(alpha)?;
    check_dim(d)?;
    if t == 0 {
        return Ok(0.0);
    }
    let q = (1.0 - alpha) * (1.0 - alpha);
    let s2 = (1.0 - powu(q, t)) / (1.0 - q);
    let s4 = (1.0 - powu(q * q, t)) / (1.0 - q * q);
    let a2 = alpha * alpha;
    Ok(2.0 * a2 * a2 / d as f64 * (s2 * s2 - s4))
}

/// `2 a^2 (1-a)^2 / ((2-a)^2 ((1-a)^2 + 1))`, the `d = 1` asymptotic variance.
fn asymptotic_var_scale(alpha: f64) -> f64 {
    let keep = 1.0 - alpha;
    let two_minus = 2.0 - alpha;
    2.0 * alpha * alpha * keep * keep / (two_minus * two_minus * (keep * keep + 1.0))
}

fn powu(base: f64, exp: u64) -> f64 {
    match i32::try_from(exp) {
        Ok(e) => base.powi(e),
        Err(_) => base.powf(exp as f64),
    }
}

/// Asymptotic mean and standard deviation of `|r_t|^2` for one `(alpha, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgnosticReference {
    pub alpha: f64,
    pub dim: usize,
    pub mean: f64,
    pub std: f64,
    /// Per-coordinate mean, `mean / d`.
    pub mean_pw: f64,
    /// Per-coordinate standard deviation, `std / sqrt(d)`.
    pub std_pw: f64,
}

impl AgnosticReference {
    pub fn new(alpha: f64, dim: usize) -> Result<Self> {
        check_open_weight(alpha)?;
        check_dim(dim)?;
        let d = dim as f64;
        let mean = alpha / (2.0 - alpha);
        let std = (asymptotic_var_scale(alpha) / d).sqrt();
        Ok(Self {
            alpha,
            dim,
            mean,
            std,
            mean_pw: mean / d,
            std_pw: std / d.sqrt(),
        })
    }
}

pub fn make_reference(alpha: f64, d: usize) -> Result<AgnosticReference> {
    AgnosticReference::new(alpha, d)
}

/// The cumulative path of normalized gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathState {
    pub p: FlatVector,
    pub t: u64,
}

impl PathState {
    pub fn new(dim: usize) -> Self {
        Self {
            p: FlatVector::zeros(dim),
            t: 0,
        }
    }

    pub fn from_vector(p: FlatVector, t: u64) -> Self {
        Self { p, t }
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.p)
    }

    /// Folds in one gradient. A zero gradient leaves the path (and `t`) unchanged.
    pub fn update(&mut self, g: &[f64], alpha: f64) -> Result<()> {
        update_path_in_place(&mut self.p, g, alpha)?;
        self.t += 1;
        Ok(())
    }
}

/// Multiplicative factor `exp(C * (x - mean) / std)`.
fn gain_factor(x: f64, mean: f64, std: f64, gain: f64) -> f64 {
    (gain * (x - mean) / std).exp()
}

fn keep_positive(eta: f64) -> f64 {
    if eta.is_nan() {
        f64::MIN_POSITIVE
    } else {
        eta.clamp(f64::MIN_POSITIVE, f64::MAX)
    }
}

/// `eta * exp(C * (|p|^2 - mean) / std)`, kept strictly positive and finite.
pub fn lr_update(eta: f64, path: &PathState, reference: &AgnosticReference, gain: f64) -> f64 {
    lr_update_norm(eta, path.norm_sq(), reference, gain)
}

/// [`lr_update`] given `|p|^2` directly.
pub fn lr_update_norm(eta: f64, path_norm_sq: f64, reference: &AgnosticReference, gain: f64) -> f64 {
    keep_positive(eta * gain_factor(path_norm_sq, reference.mean, reference.std, gain))
}

/// Coordinate-wise rule: `m_i * exp(C * (p_i^2 - mean/d) / (std/sqrt(d)))`.
pub fn lr_update_paramwise(
    multipliers: &mut [f64],
    path: &[f64],
    reference: &AgnosticReference,
    gain: f64,
) -> Result<()> {
    if multipliers.len() != path.len() {
        return Err(Error::Dimension(format!(
            "{} multipliers for a path of {} entries",
            multipliers.len(),
            path.len()
        )));
    }
    for (m, p) in multipliers.iter_mut().zip(path) {
        *m = keep_positive(*m * gain_factor(p * p, reference.mean_pw, reference.std_pw, gain));
    }
    Ok(())
}
