//! Correlation metrics, score parsing and evaluation reports.

use std::collections::BTreeMap;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::item::{ScoreItem, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("need at least two points, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: an input has zero variance")]
    Degenerate,
}

fn check(pred: &[f64], truth: &[f64]) -> Result<(), MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(MetricError::TooShort(pred.len()));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(pred) || constant(truth) {
        return Err(MetricError::Degenerate);
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson linear correlation, without any logistic remapping.
pub fn plcc(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth)?;
    Ok(pearson(pred, truth))
}

/// 1-based fractional ranks; exactly equal values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with averaged ties.
pub fn srcc(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth)?;
    Ok(pearson(&average_ranks(pred), &average_ranks(truth)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ScoreRange {
    fn default() -> Self {
        Self { lo: 1.0, hi: 5.0 }
    }
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?").expect("valid regex"))
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)score\s*:\s*(-?\d+(?:\.\d+)?)").expect("valid regex"))
}

fn boxed_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\boxed\{\s*(-?\d+(?:\.\d+)?)\s*\}").expect("valid regex"))
}

/// Numerals not glued to letters, underscores, other numerals or a sign.
fn standalone_numbers(text: &str) -> impl Iterator<Item = f64> + '_ {
    let bytes = text.as_bytes();
    number_re().find_iter(text).filter_map(move |m| {
        let before = m.start().checked_sub(1).map(|i| bytes[i]);
        let after = bytes.get(m.end()).copied();
        let glued_before = matches!(before, Some(c) if c.is_ascii_alphanumeric() || c == b'_' || c == b'.' || c == b'-');
        let glued_after = matches!(after, Some(c) if c.is_ascii_alphanumeric() || c == b'_');
        if glued_before || glued_after {
            None
        } else {
            m.as_str().parse().ok()
        }
    })
}

/// Extracts the final score from a free-text response.
///
/// In priority order: the last `SCORE:` tag, the last `\boxed{..}` answer,
/// then the last standalone numeral inside `range`. Tagged and boxed values
/// are returned as written; only the fallback is range-checked.
pub fn parse_score(text: &str, range: ScoreRange) -> Option<f64> {
    let finite = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
    if let Some(v) = tag_re().captures_iter(text).last().and_then(|c| finite(&c[1])) {
        return Some(v);
    }
    if let Some(v) = boxed_re().captures_iter(text).last().and_then(|c| finite(&c[1])) {
        return Some(v);
    }
    standalone_numbers(text).filter(|v| *v >= range.lo && *v <= range.hi).last()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Score(f64),
    Text(String),
}

pub trait Predictor<T>: Sync {
    fn predict(&self, item: &T) -> Result<Prediction, String>;
}

impl<T, F> Predictor<T> for F
where
    F: Fn(&T) -> Result<Prediction, String> + Sync,
{
    fn predict(&self, item: &T) -> Result<Prediction, String> {
        self(item)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub n_items: usize,
    pub n_parse_failures: usize,
    /// `None` when undefined: fewer than two parsed items or a constant vector.
    pub plcc: Option<f64>,
    pub srcc: Option<f64>,
}

impl Correlations {
    fn compute(n_items: usize, pairs: &[(f64, f64)]) -> Self {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        Self {
            n_items,
            n_parse_failures: n_items - pairs.len(),
            plcc: plcc(&pred, &truth).ok(),
            srcc: srcc(&pred, &truth).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    #[serde(flatten)]
    pub overall: Correlations,
    pub per_task: BTreeMap<TaskKind, Correlations>,
}

/// Runs `predictor` on every item and correlates parsed scores with truth.
/// Predictor errors and unparseable responses both count as parse failures
/// and are left out of the correlations.
pub fn evaluate<T, P>(dataset_id: &str, items: &[T], predictor: &P, range: ScoreRange) -> EvalReport
where
    T: ScoreItem + Sync,
    P: Predictor<T> + ?Sized,
{
    let parsed: Vec<Option<f64>> = items
        .par_iter()
        .map(|item| match predictor.predict(item) {
            Ok(Prediction::Score(s)) if s.is_finite() => Some(s),
            Ok(Prediction::Score(_)) | Err(_) => None,
            Ok(Prediction::Text(t)) => parse_score(&t, range),
        })
        .collect();

    let mut all = Vec::new();
    let mut by_task: BTreeMap<TaskKind, (usize, Vec<(f64, f64)>)> = BTreeMap::new();
    for (item, p) in items.iter().zip(&parsed) {
        let entry = by_task.entry(item.task()).or_default();
        entry.0 += 1;
        if let Some(s) = p {
            all.push((*s, item.truth()));
            entry.1.push((*s, item.truth()));
        }
    }
    EvalReport {
        dataset_id: dataset_id.to_string(),
        overall: Correlations::compute(items.len(), &all),
        per_task: by_task.into_iter().map(|(k, (n, v))| (k, Correlations::compute(n, &v))).collect(),
    }
}
