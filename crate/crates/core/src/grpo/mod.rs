//! Group-relative policy optimization with a token-level clipped surrogate.
//!
//! One training step samples `group_size` trajectories per item from the
//! frozen old policy, rewards them, normalizes rewards within each group,
//! optionally discards low-variance groups, gates tokens by entropy, and
//! applies one SGD update on the resulting loss.

mod gate;
mod group;
mod loss;
mod train;

pub use gate::{entropy_mask, entropy_threshold, pass_count};
pub use group::{build_group, compute_group, mean, population_std, GroupStats, ADV_STD_FLOOR};
pub use loss::{batch_objective, kl_penalty, surrogate_loss, BatchObjective, SurrogateOutput};
pub use train::{
    run_training, train_step, CheckpointSink, EpochReport, NoCheckpoints, Schedule, Sgd, SgdConfig, StepReport,
    TrainConfig, TrainState, TrainingLog,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PolicyError, Token};
use crate::reward::RewardError;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group has {got} rewards but group_size is {expected}")]
    GroupSize { expected: usize, got: usize },
    #[error("non-finite reward {value} at index {index}")]
    NonFiniteReward { index: usize, value: f64 },
    #[error("quantile entropy gate needs a non-empty batch")]
    EmptyBatch,
    #[error("non-finite ratio at group {group}, trajectory {trajectory}, token {token}")]
    Numerical { group: usize, trajectory: usize, token: usize },
    #[error("trajectory arrays disagree in length (group {group}, trajectory {trajectory})")]
    Shape { group: usize, trajectory: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("checkpoint write failed after epoch {epoch}: {source}")]
    Checkpoint {
        epoch: usize,
        #[source]
        source: std::io::Error,
    },
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub item_id: String,
    pub tokens: Vec<Token>,
    /// Per-token log-probabilities under the policy being optimized.
    pub logp_new: Vec<f64>,
    /// Per-token log-probabilities under the sampling policy.
    pub logp_old: Vec<f64>,
    /// Per-token log-probabilities under the frozen reference policy.
    pub logp_ref: Option<Vec<f64>>,
    /// Per-token entropy of the current policy, in nats.
    pub entropy: Vec<f64>,
    pub parsed_score: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The `n` trajectories sampled for one item, with their group statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGroup {
    pub item_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub retained: bool,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum EntropyGate {
    Off,
    /// Keep roughly the top `rho` fraction of pooled batch token entropies.
    Quantile { rho: f64 },
    /// Keep tokens with entropy at or above `tau`.
    Fixed { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Weight of the k3 KL penalty against the reference policy.
    pub beta: f64,
    /// Groups with population reward std at or below this are dropped (stage 2).
    pub tau_std: f64,
    pub entropy_gate: EntropyGate,
    pub stage: Stage,
    pub adv_std_normalize: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            eps_low: 0.2,
            eps_high: 0.2,
            beta: 0.04,
            tau_std: 0.001,
            entropy_gate: EntropyGate::Quantile { rho: 0.2 },
            stage: Stage::Stage2,
            adv_std_normalize: true,
        }
    }
}

impl GrpoConfig {
    /// The configuration as it applies within `stage`: stage 1 disables
    /// gating and filtering regardless of the configured values.
    pub fn for_stage(&self, stage: Stage) -> Self {
        let mut cfg = *self;
        cfg.stage = stage;
        if stage == Stage::Stage1 {
            cfg.entropy_gate = EntropyGate::Off;
            cfg.tau_std = 0.0;
        }
        cfg
    }

    /// Whether groups are filtered by reward std under this configuration.
    pub fn filters(&self) -> bool {
        self.stage == Stage::Stage2
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let fail = |m: String| Err(GrpoError::Config(m));
        if self.group_size == 0 {
            return fail("group_size must be positive".into());
        }
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return fail(format!("eps_low must lie in (0, 1), got {}", self.eps_low));
        }
        if !(self.eps_high > 0.0 && self.eps_high.is_finite()) {
            return fail(format!("eps_high must be positive, got {}", self.eps_high));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.tau_std >= 0.0 && self.tau_std.is_finite()) {
            return fail(format!("tau_std must be >= 0, got {}", self.tau_std));
        }
        match self.entropy_gate {
            EntropyGate::Quantile { rho } if !(rho > 0.0 && rho < 1.0) => {
                return fail(format!("entropy quantile rho must lie in (0, 1), got {rho}"));
            }
            EntropyGate::Fixed { tau } if !(tau >= 0.0 && tau.is_finite()) => {
                return fail(format!("fixed entropy threshold must be >= 0, got {tau}"));
            }
            EntropyGate::Off if self.stage == Stage::Stage2 => {
                return fail("stage2 requires an active entropy gate".into());
            }
            _ => {}
        }
        Ok(())
    }
}
