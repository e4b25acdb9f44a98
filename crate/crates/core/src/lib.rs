//! Group-relative reinforcement tuning for score-prediction policies.
//!
//! The crate is organised bottom-up:
//!
//! - [`reward`]: Gaussian and threshold rewards over predicted/true scores.
//! - [`policy`]: the policy contract plus tabular and MLP toy policies with
//!   exact log-probabilities, entropies and gradients, and SFT fitting.
//! - [`grpo`]: group advantages, STD filtering, entropy gating, the clipped
//!   token-level surrogate, and the two-stage training loop.
//! - [`dataset`]: plan-then-reason candidate generation and rejection filtering.
//! - [`metrics`]: PLCC/SRCC, score parsing, and evaluation reports.
//! - [`tts`]: best-of-N selection and the reflection loop over abstract clients.
//! - [`cli`]: configuration and subcommand implementations for the binary.

pub mod cli;
pub mod dataset;
pub mod grpo;
pub mod item;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod toy;
pub mod tts;

pub use item::{ScoreItem, TaskKind, ToyItem};
