//! Scalar rewards from predicted versus ground-truth scores.
//!
//! Two schemes are supported: a Gaussian kernel on the prediction error
//! (continuous, never exactly zero) and a binary threshold on the absolute
//! error. Both operate on the dataset's native score scale.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::Trajectory;
use crate::item::ScoreItem;

/// Slack used to keep the threshold boundary exclusive in the presence of
/// decimal rounding (`3.3 - 3.0` is `0.2999999999999998` in binary).
pub const THRESHOLD_BOUNDARY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("non-finite reward input: pred={pred}, truth={truth}")]
    Domain { pred: f64, truth: f64 },
    #[error("invalid reward configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Gaussian,
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Gaussian decay width in score units.
    pub sigma: f64,
    /// Threshold half-width in score units.
    pub margin: f64,
    /// Reward for a trajectory whose score could not be parsed.
    pub format_penalty: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            kind: RewardKind::Gaussian,
            sigma: 0.8,
            margin: 0.3,
            format_penalty: 0.0,
        }
    }
}

impl RewardSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: RewardKind::Gaussian,
            sigma,
            ..Self::default()
        }
    }

    pub fn threshold(margin: f64) -> Self {
        Self {
            kind: RewardKind::Threshold,
            margin,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(RewardError::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(RewardError::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(-1.0..=0.0).contains(&self.format_penalty) {
            return Err(RewardError::Config(format!(
                "format_penalty must lie in [-1, 0], got {}",
                self.format_penalty
            )));
        }
        Ok(())
    }

    /// Reward for a parsed prediction under this spec.
    pub fn score(&self, pred: f64, truth: f64) -> Result<f64, RewardError> {
        match self.kind {
            RewardKind::Gaussian => gaussian_reward(pred, truth, self.sigma),
            RewardKind::Threshold => threshold_reward(pred, truth, self.margin),
        }
    }
}

fn check_finite(pred: f64, truth: f64) -> Result<(), RewardError> {
    if pred.is_finite() && truth.is_finite() {
        Ok(())
    } else {
        Err(RewardError::Domain { pred, truth })
    }
}

/// `exp(-(pred - truth)^2 / (2 sigma^2))`.
pub fn gaussian_reward(pred: f64, truth: f64, sigma: f64) -> Result<f64, RewardError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(RewardError::Config(format!("sigma must be > 0, got {sigma}")));
    }
    check_finite(pred, truth)?;
    let err = pred - truth;
    Ok((-(err * err) / (2.0 * sigma * sigma)).exp())
}

/// 1 if `|pred - truth| < margin`, else 0. The boundary itself scores 0.
pub fn threshold_reward(pred: f64, truth: f64, margin: f64) -> Result<f64, RewardError> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(RewardError::Config(format!("margin must be > 0, got {margin}")));
    }
    check_finite(pred, truth)?;
    let err = (pred - truth).abs();
    Ok(if margin - err > THRESHOLD_BOUNDARY_EPS { 1.0 } else { 0.0 })
}

/// Reward for one sampled trajectory; unparseable or non-finite scores get
/// `spec.format_penalty`. Assumes `spec` has been validated.
pub fn reward_trajectory(traj: &Trajectory, item: &impl ScoreItem, spec: &RewardSpec) -> f64 {
    debug_assert_eq!(traj.item_id, item.id(), "trajectory scored against the wrong item");
    match traj.parsed_score {
        Some(pred) => spec.score(pred, item.truth()).unwrap_or(spec.format_penalty),
        None => spec.format_penalty,
    }
}
