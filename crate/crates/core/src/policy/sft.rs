use super::{accumulate_weighted_grad, logprob_and_entropy, Policy, PolicyError, Token};
use crate::item::ToyItem;

#[derive(Debug, Clone, PartialEq)]
pub struct SftReport {
    /// Mean token negative log-likelihood before each epoch's update.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Mean per-token negative log-likelihood of a corpus.
pub fn mean_nll<P: Policy>(policy: &P, data: &[(ToyItem, Vec<Token>)]) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (item, tokens) in data {
        let (lp, _) = logprob_and_entropy(policy, item, tokens)?;
        total -= lp.iter().sum::<f64>();
        count += tokens.len();
    }
    if count == 0 {
        return Err(PolicyError::Empty);
    }
    Ok(total / count as f64)
}

/// Maximum-likelihood fitting by full-batch gradient ascent on the mean token
/// log-likelihood; one update per epoch.
pub fn sft_fit<P: Policy>(
    mut policy: P,
    data: &[(ToyItem, Vec<Token>)],
    epochs: usize,
    lr: f64,
) -> Result<(P, SftReport), PolicyError> {
    if data.is_empty() {
        return Err(PolicyError::Empty);
    }
    let count: usize = data.iter().map(|(_, t)| t.len()).sum();
    let weight = 1.0 / count as f64;
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        epoch_losses.push(mean_nll(&policy, data)?);
        let mut grad = vec![0.0; policy.params().len()];
        for (item, tokens) in data {
            accumulate_weighted_grad(&policy, item, tokens, &vec![weight; tokens.len()], &mut grad)?;
        }
        for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
            *p += lr * g;
        }
    }
    let final_loss = mean_nll(&policy, data)?;
    Ok((policy, SftReport { epoch_losses, final_loss }))
}
