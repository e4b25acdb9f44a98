use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::grpo::{Sgd, SgdConfig, TrainState};
use crate::policy::PolicyParams;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub epochs_done: usize,
    pub global_step: u64,
    pub policy: PolicyParams,
    pub reference: PolicyParams,
    pub velocity: Vec<f64>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState<PolicyParams>, config_hash: &str, seed: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            epochs_done: state.epochs_done,
            global_step: state.global_step,
            policy: state.policy.clone(),
            reference: state.reference.clone(),
            velocity: state.optimizer.velocity.clone(),
        }
    }

    pub fn policy_only(policy: PolicyParams, config_hash: &str, seed: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            epochs_done: 0,
            global_step: 0,
            reference: policy.clone(),
            policy,
            velocity: Vec::new(),
        }
    }

    pub fn into_state(self, optimizer: SgdConfig) -> TrainState<PolicyParams> {
        TrainState {
            policy: self.policy,
            reference: self.reference,
            optimizer: Sgd {
                config: optimizer,
                velocity: self.velocity,
            },
            epochs_done: self.epochs_done,
            global_step: self.global_step,
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string(self).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(path, text)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CliError::Data(format!(
                "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        let check = |p: PolicyParams| {
            PolicyParams::from_parts(p.arch, p.vocab, p.feature_dim, p.values)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
        };
        Ok(Checkpoint {
            policy: check(ck.policy)?,
            reference: check(ck.reference)?,
            ..ck
        })
    }
}
