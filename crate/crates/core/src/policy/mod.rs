//! Policy contract and the toy score-prediction policies.
//!
//! A policy emits a prefix of reason tokens followed by one score token. Each
//! step is a categorical distribution over the active head's symbols: reason
//! steps draw from the reason tokens (conditioned on the previous reason
//! token), the final step draws from the score grid. Everything is exact, so
//! log-probabilities, entropies and gradients can be checked bit-for-bit or
//! against finite differences.

mod params;
mod sft;
mod vocab;

pub use params::{Architecture, PolicyParams};
pub use sft::{mean_nll, sft_fit, SftReport};
pub use vocab::{ScoreGrid, Token, Vocabulary};

use rand::Rng;
use thiserror::Error;

use crate::grpo::Trajectory;
use crate::item::ToyItem;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("token {token} at position {position} is not valid there")]
    InvalidToken { position: usize, token: Token },
    #[error("empty token sequence")]
    Empty,
    #[error("architecture mismatch: expected {expected} parameters, got {got}")]
    ArchitectureMismatch { expected: usize, got: usize },
    #[error("feature dimension mismatch: policy expects {expected}, item has {got}")]
    FeatureDim { expected: usize, got: usize },
    #[error("invalid policy definition: {0}")]
    Invalid(String),
}

/// Which output head produces a step's distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// A reason token; `prev` is the preceding reason token, `None` at t = 0.
    Reason { prev: Option<Token> },
    Score,
}

/// The minimal contract a policy must expose to be sampled, re-scored and
/// trained. Logits are over the active head only: `vocab.reason_tokens`
/// entries for [`Head::Reason`], `vocab.score_tokens()` for [`Head::Score`].
pub trait Policy: Clone + Send + Sync {
    fn vocab(&self) -> &Vocabulary;
    fn feature_dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn logits(&self, features: &[f64], head: Head) -> Vec<f64>;
    /// Adds `d(loss)/d(params)` to `grad` given `d(loss)/d(logits)` for one step.
    fn accumulate_grad(&self, features: &[f64], head: Head, dlogits: &[f64], grad: &mut [f64]);
}

/// Log-softmax plus the categorical entropy in nats.
pub(crate) fn log_softmax(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let logp: Vec<f64> = logits.iter().map(|&z| z - lse).collect();
    let entropy = -logp
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p > 0.0 {
                p * lp
            } else {
                0.0
            }
        })
        .sum::<f64>();
    (logp, entropy.max(0.0))
}

/// Index within the head's logit vector for `token`.
fn head_index(vocab: &Vocabulary, head: Head, token: Token) -> usize {
    match head {
        Head::Reason { .. } => token as usize,
        Head::Score => token as usize - vocab.reason_tokens,
    }
}

fn check_features<P: Policy>(policy: &P, item: &ToyItem) -> Result<(), PolicyError> {
    if item.features.len() != policy.feature_dim() {
        return Err(PolicyError::FeatureDim {
            expected: policy.feature_dim(),
            got: item.features.len(),
        });
    }
    Ok(())
}

/// Heads for each position of a token sequence, validating the layout.
pub fn heads_for(vocab: &Vocabulary, tokens: &[Token]) -> Result<Vec<Head>, PolicyError> {
    if tokens.is_empty() {
        return Err(PolicyError::Empty);
    }
    let last = tokens.len() - 1;
    tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let ok = if t == last { vocab.is_score(tok) } else { vocab.is_reason(tok) };
            if !ok {
                return Err(PolicyError::InvalidToken { position: t, token: tok });
            }
            Ok(if t == last {
                Head::Score
            } else {
                Head::Reason {
                    prev: (t > 0).then(|| tokens[t - 1]),
                }
            })
        })
        .collect()
}

/// Samples `prefix_len` reason tokens and one score token.
///
/// The returned trajectory records the sampling policy's log-probabilities in
/// both `logp_new` and `logp_old`; `logp_ref` is left empty.
pub fn sample<P: Policy, R: Rng + ?Sized>(
    policy: &P,
    item: &ToyItem,
    prefix_len: usize,
    rng: &mut R,
) -> Result<Trajectory, PolicyError> {
    check_features(policy, item)?;
    let vocab = *policy.vocab();
    let mut tokens = Vec::with_capacity(prefix_len + 1);
    let mut logp = Vec::with_capacity(prefix_len + 1);
    let mut entropy = Vec::with_capacity(prefix_len + 1);
    for t in 0..=prefix_len {
        let head = if t == prefix_len {
            Head::Score
        } else {
            Head::Reason {
                prev: tokens.last().copied(),
            }
        };
        let (lp, h) = log_softmax(&policy.logits(&item.features, head));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = lp.len() - 1;
        for (k, &l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                pick = k;
                break;
            }
        }
        let token = match head {
            Head::Reason { .. } => pick as Token,
            Head::Score => vocab.score_token(pick),
        };
        tokens.push(token);
        logp.push(lp[pick]);
        entropy.push(h);
    }
    let parsed_score = tokens.last().and_then(|&t| vocab.decode(t));
    Ok(Trajectory {
        item_id: item.id.clone(),
        tokens,
        logp_old: logp.clone(),
        logp_new: logp,
        logp_ref: None,
        entropy,
        parsed_score,
    })
}

/// Exact per-token log-probabilities and entropies of `tokens` under `policy`.
pub fn logprob_and_entropy<P: Policy>(
    policy: &P,
    item: &ToyItem,
    tokens: &[Token],
) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
    check_features(policy, item)?;
    let vocab = *policy.vocab();
    let heads = heads_for(&vocab, tokens)?;
    let mut logp = Vec::with_capacity(tokens.len());
    let mut entropy = Vec::with_capacity(tokens.len());
    for (&tok, &head) in tokens.iter().zip(&heads) {
        let (lp, h) = log_softmax(&policy.logits(&item.features, head));
        logp.push(lp[head_index(&vocab, head, tok)]);
        entropy.push(h);
    }
    Ok((logp, entropy))
}

/// Adds `sum_t coeffs[t] * grad(logp[t])` into `grad`.
pub fn accumulate_weighted_grad<P: Policy>(
    policy: &P,
    item: &ToyItem,
    tokens: &[Token],
    coeffs: &[f64],
    grad: &mut [f64],
) -> Result<(), PolicyError> {
    check_features(policy, item)?;
    if grad.len() != policy.params().len() {
        return Err(PolicyError::ArchitectureMismatch {
            expected: policy.params().len(),
            got: grad.len(),
        });
    }
    let vocab = *policy.vocab();
    let heads = heads_for(&vocab, tokens)?;
    debug_assert_eq!(coeffs.len(), tokens.len());
    for ((&tok, &head), &c) in tokens.iter().zip(&heads).zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        let (lp, _) = log_softmax(&policy.logits(&item.features, head));
        let k = head_index(&vocab, head, tok);
        // d logp_k / d z_j = 1[j = k] - p_j
        let dlogits: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(j, &l)| c * (f64::from(u8::from(j == k)) - l.exp()))
            .collect();
        policy.accumulate_grad(&item.features, head, &dlogits, grad);
    }
    Ok(())
}

/// Gradient of `sum_t logp[t]` with respect to the policy parameters.
pub fn grad_logprob<P: Policy>(
    policy: &P,
    item: &ToyItem,
    tokens: &[Token],
) -> Result<Vec<f64>, PolicyError> {
    let mut grad = vec![0.0; policy.params().len()];
    accumulate_weighted_grad(policy, item, tokens, &vec![1.0; tokens.len()], &mut grad)?;
    Ok(grad)
}
