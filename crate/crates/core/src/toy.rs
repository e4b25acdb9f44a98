//! Synthetic score-prediction task and predictors for toy policies.
//!
//! Item features are standard normal; the truth score is a sigmoid of a fixed
//! random projection, stretched over the score grid and snapped to it.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::item::{TaskKind, ToyItem};
use crate::policy::{log_softmax, Head, Policy, ScoreGrid};
use crate::rng;

const WEIGHT_STREAM: u64 = 0x5747;
const ITEM_STREAM: u64 = 0x4954;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub feature_dim: usize,
    /// Slope of the sigmoid; larger values push truths toward the grid ends.
    pub gain: f64,
    pub bias: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            feature_dim: 4,
            gain: 1.5,
            bias: 0.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEnv {
    pub config: ToyConfig,
    pub grid: ScoreGrid,
    weights: Vec<f64>,
}

impl ToyEnv {
    pub fn new(config: ToyConfig, grid: ScoreGrid) -> Self {
        let mut r = rng::stream(config.seed, &[WEIGHT_STREAM]);
        let raw: Vec<f64> = (0..config.feature_dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = raw.iter().map(|w| w * w).sum::<f64>().sqrt().max(1e-12);
        Self {
            config,
            grid,
            weights: raw.into_iter().map(|w| w / norm).collect(),
        }
    }

    pub fn truth(&self, features: &[f64]) -> f64 {
        let z: f64 = self.weights.iter().zip(features).map(|(w, x)| w * x).sum();
        let s = 1.0 / (1.0 + (-(self.config.gain * z + self.config.bias)).exp());
        self.grid.snap(self.grid.lo + (self.grid.hi - self.grid.lo) * s)
    }

    /// `n` items of split `split`; different splits never share feature draws.
    pub fn items(&self, split: u64, n: usize) -> Vec<ToyItem> {
        (0..n)
            .map(|i| {
                let mut r = rng::stream(self.config.seed, &[ITEM_STREAM, split, i as u64]);
                let features: Vec<f64> =
                    (0..self.config.feature_dim).map(|_| StandardNormal.sample(&mut r)).collect();
                ToyItem {
                    id: format!("s{split}-{i:05}"),
                    task: TaskKind::ALL[i % TaskKind::ALL.len()],
                    truth: self.truth(&features),
                    features,
                }
            })
            .collect()
    }
}

/// Mean of the score head's distribution. The score head does not depend on
/// the reason prefix, so this is the exact expected prediction.
pub fn expected_score<P: Policy>(policy: &P, item: &ToyItem) -> f64 {
    let grid = policy.vocab().grid;
    let (lp, _) = log_softmax(&policy.logits(&item.features, Head::Score));
    lp.iter().enumerate().map(|(k, l)| l.exp() * grid.value(k)).sum()
}

/// Most likely grid score; the lowest index wins ties.
pub fn greedy_score<P: Policy>(policy: &P, item: &ToyItem) -> f64 {
    let logits = policy.logits(&item.features, Head::Score);
    let mut best = 0;
    for (k, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = k;
        }
    }
    policy.vocab().grid.value(best)
}

/// Text response in the same shape a language model would produce:
/// reason tokens followed by a tagged score line.
pub fn render_response<P: Policy>(policy: &P, item: &ToyItem) -> String {
    let vocab = policy.vocab();
    let mut prev = None;
    let mut parts = Vec::new();
    for _ in 0..vocab.reason_tokens.min(6) {
        let logits = policy.logits(&item.features, Head::Reason { prev });
        let mut best = 0;
        for (k, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = k;
            }
        }
        parts.push(format!("r{best}"));
        prev = Some(best as u32);
    }
    format!("{}\nSCORE: {:.4}", parts.join(" "), expected_score(policy, item))
}
