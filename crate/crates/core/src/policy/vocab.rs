use serde::{Deserialize, Serialize};

/// Token index into a [`Vocabulary`].
pub type Token = u32;

/// An evenly spaced, strictly increasing score grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for ScoreGrid {
    fn default() -> Self {
        Self { lo: 1.0, hi: 5.0, step: 0.1 }
    }
}

impl ScoreGrid {
    pub fn len(&self) -> usize {
        ((self.hi - self.lo) / self.step).round() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self, index: usize) -> f64 {
        self.lo + index as f64 * self.step
    }

    /// Grid index of `score` if it lies on the grid (within 1e-9 grid steps).
    pub fn index_of(&self, score: f64) -> Option<usize> {
        if !score.is_finite() {
            return None;
        }
        let pos = (score - self.lo) / self.step;
        let k = pos.round();
        if k < 0.0 || k as usize >= self.len() || (pos - k).abs() > 1e-9 {
            return None;
        }
        Some(k as usize)
    }

    /// Nearest grid index, clamping out-of-range scores to the ends.
    pub fn nearest(&self, score: f64) -> usize {
        let pos = ((score - self.lo) / self.step).round();
        if pos.is_nan() || pos <= 0.0 {
            0
        } else {
            (pos as usize).min(self.len() - 1)
        }
    }

    pub fn snap(&self, score: f64) -> f64 {
        self.value(self.nearest(score))
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.step.is_finite()) {
            return Err("score grid bounds must be finite".into());
        }
        if !(self.step > 0.0 && self.hi > self.lo) {
            return Err(format!(
                "score grid needs lo < hi and step > 0, got lo={} hi={} step={}",
                self.lo, self.hi, self.step
            ));
        }
        let n = (self.hi - self.lo) / self.step;
        if (n - n.round()).abs() > 1e-9 {
            return Err("score grid step must divide hi - lo".into());
        }
        Ok(())
    }
}

/// Reason tokens occupy `0..reason_tokens`; score tokens follow, one per grid
/// point. A trajectory is any number of reason tokens terminated by exactly
/// one score token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Vocabulary {
    pub reason_tokens: usize,
    pub grid: ScoreGrid,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            reason_tokens: 8,
            grid: ScoreGrid::default(),
        }
    }
}

impl Vocabulary {
    pub fn score_tokens(&self) -> usize {
        self.grid.len()
    }

    pub fn size(&self) -> usize {
        self.reason_tokens + self.score_tokens()
    }

    pub fn is_reason(&self, token: Token) -> bool {
        (token as usize) < self.reason_tokens
    }

    pub fn is_score(&self, token: Token) -> bool {
        let t = token as usize;
        t >= self.reason_tokens && t < self.size()
    }

    /// Score token for grid position `index`.
    pub fn score_token(&self, index: usize) -> Token {
        (self.reason_tokens + index) as Token
    }

    pub fn decode(&self, token: Token) -> Option<f64> {
        self.is_score(token)
            .then(|| self.grid.value(token as usize - self.reason_tokens))
    }

    pub fn encode(&self, score: f64) -> Option<Token> {
        self.grid.index_of(score).map(|k| self.score_token(k))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.reason_tokens == 0 {
            return Err("vocabulary needs at least one reason token".into());
        }
        self.grid.validate()
    }
}
