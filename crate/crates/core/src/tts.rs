//! Reward-guided test-time selection: best-of-N sampling and a reflection
//! loop over abstract generator and scorer clients.

use std::collections::BTreeMap;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::item::TaskKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("transient client error: {0}")]
    Transient(String),
    #[error("client error: {0}")]
    Fatal(String),
}

impl ClientError {
    pub fn retryable(&self) -> bool {
        matches!(self, ClientError::Transient(_))
    }
}

#[derive(Debug, Error)]
pub enum TtsError {
    #[error("every candidate failed for prompt `{0}`")]
    AllFailed(String),
    #[error("combiner needs a {0} score")]
    MissingScore(TaskKind),
    #[error("invalid selection config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateRequest<'a> {
    pub prompt: &'a Prompt,
    pub feedback: Option<&'a str>,
    pub sample_index: usize,
    pub round: usize,
}

pub trait Generator: Sync {
    /// Returns an opaque artifact handle.
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<String, ClientError>;
}

pub trait Scorer: Sync {
    fn score(&self, artifact: &str, task: TaskKind) -> Result<f64, ClientError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: usize,
    /// First backoff; doubles after every failed attempt.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            backoff_ms: 50,
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut delay = self.backoff_ms;
        let mut attempt = 0;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable() && attempt < self.max_retries => {
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Combiner {
    /// Arithmetic mean of the aesthetic and technical scores.
    Mean,
    Weighted { w_aes: f64, w_tech: f64 },
    Single { task: TaskKind },
}

impl Combiner {
    pub fn tasks(&self) -> Vec<TaskKind> {
        match *self {
            Combiner::Mean | Combiner::Weighted { .. } => vec![TaskKind::Aesthetic, TaskKind::Technical],
            Combiner::Single { task } => vec![task],
        }
    }

    pub fn validate(&self) -> Result<(), TtsError> {
        if let Combiner::Weighted { w_aes, w_tech } = *self {
            if !(w_aes >= 0.0 && w_tech >= 0.0 && w_aes + w_tech > 0.0 && (w_aes + w_tech).is_finite()) {
                return Err(TtsError::Config(format!(
                    "weights must be nonnegative with a positive sum, got {w_aes}, {w_tech}"
                )));
            }
        }
        Ok(())
    }
}

pub fn combine_scores(scores: &BTreeMap<TaskKind, f64>, combiner: &Combiner) -> Result<f64, TtsError> {
    let get = |t: TaskKind| scores.get(&t).copied().ok_or(TtsError::MissingScore(t));
    match *combiner {
        Combiner::Mean => Ok((get(TaskKind::Aesthetic)? + get(TaskKind::Technical)?) / 2.0),
        Combiner::Weighted { w_aes, w_tech } => {
            let aes = if w_aes == 0.0 { 0.0 } else { w_aes * get(TaskKind::Aesthetic)? };
            let tech = if w_tech == 0.0 { 0.0 } else { w_tech * get(TaskKind::Technical)? };
            Ok((aes + tech) / (w_aes + w_tech))
        }
        Combiner::Single { task } => get(task),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtsConfig {
    pub n: usize,
    pub combiner: Combiner,
    pub reflection_rounds: usize,
    /// Reflection stops after this many failed rounds in a row.
    pub max_consecutive_failures: usize,
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for TtsConfig {
    fn default() -> Self {
        Self {
            n: 20,
            combiner: Combiner::Mean,
            reflection_rounds: 20,
            max_consecutive_failures: 3,
            parallelism: 4,
            retry: RetryPolicy::default(),
        }
    }
}

impl TtsConfig {
    pub fn validate(&self) -> Result<(), TtsError> {
        if self.n == 0 {
            return Err(TtsError::Config("n must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(TtsError::Config("parallelism must be at least 1".into()));
        }
        if self.max_consecutive_failures == 0 {
            return Err(TtsError::Config("max_consecutive_failures must be at least 1".into()));
        }
        self.combiner.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub prompt_id: String,
    pub index: usize,
    pub artifact: String,
    pub scores: BTreeMap<TaskKind, f64>,
    pub combined: f64,
    pub generation_round: usize,
}

fn produce(
    prompt: &Prompt,
    feedback: Option<&str>,
    index: usize,
    round: usize,
    generator: &dyn Generator,
    scorer: &dyn Scorer,
    cfg: &TtsConfig,
) -> Result<Candidate, ClientError> {
    let req = GenerateRequest {
        prompt,
        feedback,
        sample_index: index,
        round,
    };
    let artifact = cfg.retry.run(|| generator.generate(&req))?;
    let mut scores = BTreeMap::new();
    for task in cfg.combiner.tasks() {
        let s = cfg.retry.run(|| scorer.score(&artifact, task))?;
        if !s.is_finite() {
            return Err(ClientError::Fatal(format!("non-finite {task} score")));
        }
        scores.insert(task, s);
    }
    let combined = combine_scores(&scores, &cfg.combiner).map_err(|e| ClientError::Fatal(e.to_string()))?;
    Ok(Candidate {
        prompt_id: prompt.id.clone(),
        index,
        artifact,
        scores,
        combined,
        generation_round: round,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestOfN {
    pub winner: Candidate,
    /// Surviving candidates in index order.
    pub candidates: Vec<Candidate>,
    pub failed: Vec<usize>,
}

/// Index of the highest combined score; the earliest wins ties.
pub fn argmax(candidates: &[Candidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if best.is_none_or(|b| c.combined > candidates[b].combined) {
            best = Some(i);
        }
    }
    best
}

pub fn best_of_n(
    prompt: &Prompt,
    generator: &dyn Generator,
    scorer: &dyn Scorer,
    cfg: &TtsConfig,
) -> Result<BestOfN, TtsError> {
    cfg.validate()?;
    let mut outcomes: Vec<Result<Candidate, ClientError>> = Vec::with_capacity(cfg.n);
    let indices: Vec<usize> = (0..cfg.n).collect();
    for chunk in indices.chunks(cfg.parallelism) {
        if chunk.len() == 1 {
            outcomes.push(produce(prompt, None, chunk[0], 0, generator, scorer, cfg));
            continue;
        }
        thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| s.spawn(move || produce(prompt, None, i, 0, generator, scorer, cfg)))
                .collect();
            for h in handles {
                outcomes.push(h.join().unwrap_or_else(|_| Err(ClientError::Fatal("worker panicked".into()))));
            }
        });
    }
    let mut candidates = Vec::new();
    let mut failed = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(c) => candidates.push(c),
            Err(_) => failed.push(i),
        }
    }
    let best = argmax(&candidates).ok_or_else(|| TtsError::AllFailed(prompt.id.clone()))?;
    Ok(BestOfN {
        winner: candidates[best].clone(),
        candidates,
        failed,
    })
}

pub trait FeedbackBuilder: Sync {
    fn build(&self, prompt: &Prompt, best: &Candidate) -> String;
}

/// Names the current best artifact and lists its scores, weakest first.
pub struct ScoreFeedback;

impl FeedbackBuilder for ScoreFeedback {
    fn build(&self, prompt: &Prompt, best: &Candidate) -> String {
        let mut scores: Vec<(TaskKind, f64)> = best.scores.iter().map(|(&k, &v)| (k, v)).collect();
        scores.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let listed: Vec<String> = scores.iter().map(|(k, v)| format!("{k}={v:?}")).collect();
        let mut text = format!("prompt: {}\nhandle={}\nscores: {}", prompt.text, best.artifact, listed.join(" "));
        if let Some((weakest, _)) = scores.first() {
            text.push_str(&format!("\nimprove the {weakest} quality"));
        }
        text
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: usize,
    pub candidate: Option<Candidate>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reflection {
    pub best: Candidate,
    pub rounds: Vec<RoundOutcome>,
    pub stopped_early: bool,
}

/// Repeatedly regenerates from feedback on the running best. A refinement
/// replaces the best only when its combined score is strictly higher.
pub fn reflect_loop(
    prompt: &Prompt,
    seed_winner: Candidate,
    generator: &dyn Generator,
    scorer: &dyn Scorer,
    cfg: &TtsConfig,
    feedback: &dyn FeedbackBuilder,
) -> Result<Reflection, TtsError> {
    cfg.validate()?;
    let mut best = seed_winner;
    let mut rounds = Vec::with_capacity(cfg.reflection_rounds);
    let mut consecutive_failures = 0;
    let mut stopped_early = false;
    for round in 1..=cfg.reflection_rounds {
        let text = feedback.build(prompt, &best);
        match produce(prompt, Some(&text), 0, round, generator, scorer, cfg) {
            Ok(c) => {
                consecutive_failures = 0;
                let improved = c.combined > best.combined;
                if improved {
                    best = c.clone();
                }
                rounds.push(RoundOutcome {
                    round,
                    candidate: Some(c),
                    improved,
                });
            }
            Err(_) => {
                consecutive_failures += 1;
                rounds.push(RoundOutcome {
                    round,
                    candidate: None,
                    improved: false,
                });
                if consecutive_failures >= cfg.max_consecutive_failures {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(Reflection {
        best,
        rounds,
        stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub prompt_id: String,
    pub round: usize,
    pub candidate_index: usize,
    pub scores: BTreeMap<TaskKind, f64>,
    pub combined: f64,
    pub chosen: bool,
}

impl TranscriptRecord {
    fn of(c: &Candidate, chosen: bool) -> Self {
        Self {
            prompt_id: c.prompt_id.clone(),
            round: c.generation_round,
            candidate_index: c.index,
            scores: c.scores.clone(),
            combined: c.combined,
            chosen,
        }
    }
}

/// Best-of-N followed by reflection, flattened into transcript rows. Round 0
/// rows mark the best-of-N winner; later rows mark refinements that became
/// the running best.
pub fn select(
    prompt: &Prompt,
    generator: &dyn Generator,
    scorer: &dyn Scorer,
    cfg: &TtsConfig,
    feedback: &dyn FeedbackBuilder,
) -> Result<(Candidate, Vec<TranscriptRecord>), TtsError> {
    let bon = best_of_n(prompt, generator, scorer, cfg)?;
    let mut rows: Vec<TranscriptRecord> = bon
        .candidates
        .iter()
        .map(|c| TranscriptRecord::of(c, c.index == bon.winner.index))
        .collect();
    let refl = reflect_loop(prompt, bon.winner, generator, scorer, cfg, feedback)?;
    rows.extend(
        refl.rounds
            .iter()
            .filter_map(|r| r.candidate.as_ref().map(|c| TranscriptRecord::of(c, r.improved))),
    );
    Ok((refl.best, rows))
}

/// Deterministic in-process clients. Artifact handles carry their qualities
/// as `mock:<aesthetic>:<technical>`.
pub mod mock {
    use super::*;
    use rand::Rng;
    use sha2::{Digest, Sha256};

    use crate::rng;

    pub const SCORE_MAX: f64 = 5.0;
    /// Mock qualities live on multiples of this, so sums stay exact.
    pub const QUANTUM: f64 = 1.0 / 64.0;

    pub fn handle(aes: f64, tech: f64) -> String {
        format!("mock:{aes:?}:{tech:?}")
    }

    pub fn parse_handle(h: &str) -> Option<(f64, f64)> {
        let rest = h.strip_prefix("mock:")?;
        let (a, t) = rest.split_once(':')?;
        Some((a.parse().ok()?, t.parse().ok()?))
    }

    fn prompt_key(id: &str) -> u64 {
        let digest = Sha256::digest(id.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Fresh samples have qualities drawn uniformly from the quantized
    /// `[1, 5]`. With feedback, both qualities of the named artifact rise by
    /// `delta`, capped at [`SCORE_MAX`].
    #[derive(Debug, Clone, Copy)]
    pub struct MockGenerator {
        pub seed: u64,
        pub delta: f64,
    }

    impl Generator for MockGenerator {
        fn generate(&self, req: &GenerateRequest<'_>) -> Result<String, ClientError> {
            if let Some(fb) = req.feedback {
                let (a, t) = fb
                    .lines()
                    .find_map(|l| l.strip_prefix("handle="))
                    .and_then(parse_handle)
                    .ok_or_else(|| ClientError::Fatal("feedback names no artifact".into()))?;
                let step = |q: f64| (q + self.delta).clamp(1.0, SCORE_MAX);
                return Ok(handle(step(a), step(t)));
            }
            let mut r = rng::stream(self.seed, &[prompt_key(&req.prompt.id), req.sample_index as u64]);
            let mut draw = || 1.0 + r.random_range(0..=256u32) as f64 * QUANTUM;
            let a = draw();
            let t = draw();
            Ok(handle(a, t))
        }
    }

    #[derive(Debug, Clone, Copy)]
    pub enum MockScorer {
        /// Reports the encoded quality.
        Quality,
        /// Reports `-|quality - target|`.
        Deviation { target: f64 },
    }

    impl Scorer for MockScorer {
        fn score(&self, artifact: &str, task: TaskKind) -> Result<f64, ClientError> {
            let (a, t) = parse_handle(artifact).ok_or_else(|| ClientError::Fatal(format!("unknown artifact {artifact}")))?;
            let q = match task {
                TaskKind::Aesthetic => a,
                TaskKind::Technical => t,
                TaskKind::Alignment => (a + t) / 2.0,
            };
            Ok(match *self {
                MockScorer::Quality => q,
                MockScorer::Deviation { target } => -(q - target).abs(),
            })
        }
    }
}
