//! Group-relative policy optimization math.
//!
//! Advantages are standardized within a group of rollouts (population
//! standard deviation, zeroed when the spread is below a floor), broadcast
//! to every token of their trace, and fed to the clipped surrogate with a
//! per-token KL penalty against a frozen reference policy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("group of {0} is too small; need at least 2 rollouts")]
    GroupTooSmall(usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("trace {0} has no tokens")]
    EmptyTrace(usize),
    #[error("trace {0}: log-probability sequences differ in length")]
    LengthMismatch(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct GrpoConfig<T> {
    pub group_size: usize,
    pub clip_eps: T,
    pub kl_beta: T,
    pub std_floor: T,
}

impl<T: Scalar> Default for GrpoConfig<T> {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: T::lit(0.2),
            kl_beta: T::lit(0.04),
            std_floor: T::lit(1e-8),
        }
    }
}

impl<T: Scalar> GrpoConfig<T> {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.clip_eps > T::zero() && self.clip_eps < T::one()) {
            return Err(GrpoError::InvalidConfig(format!("clip_eps {} not in (0, 1)", self.clip_eps)));
        }
        if !self.kl_beta.is_finite() || self.kl_beta < T::zero() {
            return Err(GrpoError::InvalidConfig(format!("kl_beta {} must be finite and >= 0", self.kl_beta)));
        }
        if self.std_floor.is_nan() || self.std_floor <= T::zero() {
            return Err(GrpoError::InvalidConfig(format!("std_floor {} must be > 0", self.std_floor)));
        }
        Ok(())
    }
}

/// Standardized group advantages `(R_i - mean) / std`.
pub fn group_advantages<T: Scalar>(rewards: &[T], std_floor: T) -> Result<Vec<T>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite);
    }
    let n = T::lit(rewards.len() as f64);
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if std < std_floor {
        return Ok(vec![T::zero(); rewards.len()]);
    }
    Ok(rewards.iter().map(|&r| (r - mean) / std).collect())
}

fn check_finite<T: Scalar>(xs: &[T]) -> Result<(), GrpoError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GrpoError::NonFinite)
    }
}

/// `pi_new / pi_old` for one token, from log-probabilities.
pub fn importance_ratio<T: Scalar>(logp_new: T, logp_old: T) -> Result<T, GrpoError> {
    check_finite(&[logp_new, logp_old])?;
    Ok((logp_new - logp_old).exp())
}

/// Non-negative per-token KL estimate `exp(d) - d - 1` with `d = logp_ref - logp_new`.
pub fn kl_token<T: Scalar>(logp_new: T, logp_ref: T) -> Result<T, GrpoError> {
    check_finite(&[logp_new, logp_ref])?;
    let d = logp_ref - logp_new;
    // exp_m1 keeps the estimate exact near zero and non-negative
    Ok((d.exp_m1() - d).max(T::zero()))
}

fn clip<T: Scalar>(x: T, lo: T, hi: T) -> T {
    x.max(lo).min(hi)
}

/// Per-token surrogate `min(r A, clip(r) A) - beta * KL`.
pub fn token_objective<T: Scalar>(
    logp_new: T,
    logp_old: T,
    logp_ref: T,
    advantage: T,
    config: &GrpoConfig<T>,
) -> Result<T, GrpoError> {
    let r = importance_ratio(logp_new, logp_old)?;
    let clipped = clip(r, T::one() - config.clip_eps, T::one() + config.clip_eps);
    let surrogate = (r * advantage).min(clipped * advantage);
    Ok(surrogate - config.kl_beta * kl_token(logp_new, logp_ref)?)
}

/// Derivative of [`token_objective`] with respect to `logp_new`.
///
/// The clipped branch contributes nothing when it is the active minimum
/// with the ratio outside the band.
pub fn token_objective_grad<T: Scalar>(
    logp_new: T,
    logp_old: T,
    logp_ref: T,
    advantage: T,
    config: &GrpoConfig<T>,
) -> Result<T, GrpoError> {
    let r = importance_ratio(logp_new, logp_old)?;
    check_finite(&[logp_ref, advantage])?;
    let clipped = clip(r, T::one() - config.clip_eps, T::one() + config.clip_eps);
    let surrogate_grad = if r * advantage <= clipped * advantage { advantage * r } else { T::zero() };
    let kl_grad = T::one() - (logp_ref - logp_new).exp();
    Ok(surrogate_grad - config.kl_beta * kl_grad)
}

/// One rollout: per-token log-probabilities under the current, sampling and
/// reference policies, plus its scalar reward and advantage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de> + Default"))]
pub struct Trace<T> {
    pub logp_new: Vec<T>,
    pub logp_old: Vec<T>,
    pub logp_ref: Vec<T>,
    pub reward: T,
    #[serde(default)]
    pub advantage: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de> + Default"))]
pub struct RolloutGroup<T> {
    pub traces: Vec<Trace<T>>,
}

impl<T: Scalar> RolloutGroup<T> {
    pub fn new(traces: Vec<Trace<T>>) -> Self {
        Self { traces }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn rewards(&self) -> Vec<T> {
        self.traces.iter().map(|t| t.reward).collect()
    }

    /// Recomputes every trace's advantage from the group's rewards.
    pub fn fill_advantages(&mut self, std_floor: T) -> Result<(), GrpoError> {
        let adv = group_advantages(&self.rewards(), std_floor)?;
        for (t, a) in self.traces.iter_mut().zip(adv) {
            t.advantage = a;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        for (i, t) in self.traces.iter().enumerate() {
            if t.logp_new.is_empty() {
                return Err(GrpoError::EmptyTrace(i));
            }
            if t.logp_old.len() != t.logp_new.len() || t.logp_ref.len() != t.logp_new.len() {
                return Err(GrpoError::LengthMismatch(i));
            }
            check_finite(&[t.reward, t.advantage])?;
        }
        Ok(())
    }
}

/// Group objective: mean over traces of the token-averaged clipped surrogate
/// minus the KL penalty, with each trace's advantage on every token.
pub fn grpo_objective<T: Scalar>(group: &RolloutGroup<T>, config: &GrpoConfig<T>) -> Result<T, GrpoError> {
    group.validate()?;
    if group.is_empty() {
        return Err(GrpoError::GroupTooSmall(0));
    }
    let mut total = T::zero();
    for t in &group.traces {
        let mut acc = T::zero();
        for ((&new, &old), &reference) in t.logp_new.iter().zip(&t.logp_old).zip(&t.logp_ref) {
            acc = acc + token_objective(new, old, reference, t.advantage, config)?;
        }
        total = total + acc / T::lit(t.logp_new.len() as f64);
    }
    Ok(total / T::lit(group.len() as f64))
}
