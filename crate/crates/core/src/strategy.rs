//! Aggregation and local-update mathematics.
//!
//! The trust-adaptive update blends each client's trained parameters with the
//! current global parameters:
//!
//! ```text
//! w_i* = (1 - alpha_i) * w_i + alpha_i * w_global
//! alpha_i = alpha_min + phi(ds_i) * (alpha_max - alpha_min)
//! phi(ds) = 0                                   if ds <= 0
//!         = (s(ds) - s(0)) / (s(1) - s(0))      otherwise, clamped to [0, 1]
//! s(x)    = 1 / (1 + exp(-k (x - midpoint)))
//! ds_i    = score(global) - score(local_i)
//! ```
//!
//! and the server takes the unweighted mean of the blended vectors.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::params::Params;
use crate::scalar::Scalar;

/// Parameters of the trust-gap to alpha mapping, plus the per-round growth of
/// the sigmoid steepness `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AlphaSchedule<T> {
    pub k0: T,
    pub midpoint: T,
    pub alpha_min: T,
    pub alpha_max: T,
    /// Relative increase of `k` per communication round.
    pub k_growth: T,
}

impl<T: Scalar> Default for AlphaSchedule<T> {
    fn default() -> Self {
        Self {
            k0: T::lit(0.7),
            midpoint: T::lit(0.01),
            alpha_min: T::lit(0.1),
            alpha_max: T::one(),
            k_growth: T::lit(0.01),
        }
    }
}

impl<T: Scalar> AlphaSchedule<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.k0 > T::zero()) || !self.k0.is_finite() {
            return Err(FedError::config("k0", "must be a finite positive number"));
        }
        if !self.midpoint.is_finite() {
            return Err(FedError::config("midpoint", "must be finite"));
        }
        if !(self.alpha_min >= T::zero()) || !(self.alpha_min < self.alpha_max) {
            return Err(FedError::config("alpha_min", "need 0 <= alpha_min < alpha_max"));
        }
        if !(self.alpha_max <= T::one()) {
            return Err(FedError::config("alpha_max", "must not exceed 1"));
        }
        if !(self.k_growth >= T::zero()) || !self.k_growth.is_finite() {
            return Err(FedError::config("k_growth", "must be a finite non-negative number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Scalar")]
pub enum StrategyConfig<T> {
    FedAvg,
    FedProx {
        mu: T,
    },
    #[serde(rename = "feddtre")]
    FedDtre(AlphaSchedule<T>),
    FixedAlpha {
        alpha: T,
    },
    /// No federation: every client keeps and trains its own model.
    LocalOnly,
}

impl<T: Scalar> StrategyConfig<T> {
    pub fn validate(&self) -> Result<()> {
        match self {
            StrategyConfig::FedProx { mu } if !(*mu > T::zero()) || !mu.is_finite() => {
                Err(FedError::config("mu", "must be a finite positive number"))
            }
            StrategyConfig::FedDtre(sched) => sched.validate(),
            StrategyConfig::FixedAlpha { alpha } if !(*alpha >= T::zero() && *alpha <= T::one()) => {
                Err(FedError::config("alpha", "must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in reports and CSV rows.
    pub fn label(&self) -> String {
        match self {
            StrategyConfig::FedAvg => "FedAvg".to_string(),
            StrategyConfig::FedProx { .. } => "FedProx".to_string(),
            StrategyConfig::FedDtre(_) => "FedDTRE".to_string(),
            StrategyConfig::FixedAlpha { alpha } => format!("alpha={}", alpha),
            StrategyConfig::LocalOnly => "Local".to_string(),
        }
    }
}

/// Unweighted coordinate-wise mean, accumulated in the order given.
///
/// Uses the running form `m_k = m_{k-1} + (x_k - m_{k-1}) / k`, which returns
/// identical inputs unchanged bit for bit.
pub fn aggregate_mean<T: Scalar>(updates: &[&Params<T>]) -> Result<Params<T>> {
    let first = updates
        .first()
        .ok_or_else(|| FedError::invalid("cannot aggregate an empty update list"))?;
    for u in &updates[1..] {
        first.ensure_same_dim(u)?;
    }
    let mut mean = first.as_slice().to_vec();
    for (i, u) in updates.iter().enumerate().skip(1) {
        let k = T::from_count(i + 1);
        for (m, &x) in mean.iter_mut().zip(u.as_slice()) {
            *m = *m + (x - *m) / k;
        }
    }
    Ok(Params::from_vec_unchecked(mean))
}

/// Mean over `(client_id, update)` pairs, summed in ascending client id so the
/// result does not depend on arrival order.
pub fn aggregate_by_client<T: Scalar>(updates: &[(usize, Params<T>)]) -> Result<Params<T>> {
    let mut sorted: Vec<&(usize, Params<T>)> = updates.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(FedError::invalid("duplicate client id in update list"));
    }
    let refs: Vec<&Params<T>> = sorted.iter().map(|(_, p)| p).collect();
    aggregate_mean(&refs)
}

#[inline]
pub fn sigmoid_k<T: Scalar>(x: T, k: T, midpoint: T) -> T {
    (k * (x - midpoint)).logistic()
}

pub fn phi_score<T: Scalar>(delta_s: T, k: T, midpoint: T) -> T {
    if !(delta_s > T::zero()) {
        return T::zero();
    }
    let s0 = sigmoid_k(T::zero(), k, midpoint);
    let s1 = sigmoid_k(T::one(), k, midpoint);
    let s = sigmoid_k(delta_s, k, midpoint);
    ((s - s0) / (s1 - s0)).clamp_unit()
}

#[inline]
pub fn compute_alpha<T: Scalar>(phi: T, sched: &AlphaSchedule<T>) -> T {
    sched.alpha_min + phi * (sched.alpha_max - sched.alpha_min)
}

#[inline]
pub fn delta_s<T: Scalar>(s_global: T, s_local: T) -> T {
    s_global - s_local
}

/// Steepness for a given communication round: `k0 * (1 + k_growth * round)`.
#[inline]
pub fn k_schedule<T: Scalar>(sched: &AlphaSchedule<T>, round: usize) -> T {
    sched.k0 * (T::one() + sched.k_growth * T::from_count(round))
}

/// Alpha for one client given the two trust scores.
pub fn adaptive_alpha<T: Scalar>(s_global: T, s_local: T, sched: &AlphaSchedule<T>, round: usize) -> T {
    let k = k_schedule(sched, round);
    let phi = phi_score(delta_s(s_global, s_local), k, sched.midpoint);
    compute_alpha(phi, sched)
}

/// `(1 - alpha) * local + alpha * global`, coordinate-wise.
pub fn blend_update<T: Scalar>(local: &Params<T>, global: &Params<T>, alpha: T) -> Result<Params<T>> {
    local.ensure_same_dim(global)?;
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(FedError::invalid(format!("blend weight {alpha} outside [0, 1]")));
    }
    let keep = T::one() - alpha;
    let v = local
        .as_slice()
        .iter()
        .zip(global.as_slice())
        .map(|(&l, &g)| keep * l + alpha * g)
        .collect();
    Ok(Params::from_vec_unchecked(v))
}

/// Proximal penalty `(mu / 2) * ||w - anchor||^2` and its gradient `mu * (w - anchor)`.
pub fn fedprox_penalty<T: Scalar>(w: &Params<T>, anchor: &Params<T>, mu: T) -> Result<(T, Params<T>)> {
    w.ensure_same_dim(anchor)?;
    let diff: Vec<T> = w.as_slice().iter().zip(anchor.as_slice()).map(|(&a, &b)| a - b).collect();
    let sq: T = diff.iter().map(|&d| d * d).sum();
    let loss = mu / T::lit(2.0) * sq;
    let grad = diff.into_iter().map(|d| mu * d).collect();
    Ok((loss, Params::from_vec_unchecked(grad)))
}
