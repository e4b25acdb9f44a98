//! Cold-start corpus construction with a simulated plan-then-reason teacher
//! and rejection sampling that drops items which are too easy or too hard.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::item::{ScoreItem, TaskKind, ToyItem};
use crate::policy::{Token, Vocabulary};
use crate::reward::{gaussian_reward, RewardSpec};
use crate::rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("record `{item_id}`: {reason}")]
    Record { item_id: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Teacher,
    Human,
    Synthetic,
}

/// A teacher response before export: the plan is kept here only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReasonRecord {
    pub item_id: String,
    pub task: TaskKind,
    pub question: String,
    pub plan: String,
    pub reasoning_tokens: Vec<Token>,
    pub final_score: f64,
    pub provenance: Provenance,
}

/// Exported training form; carries no plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecord {
    pub item_id: String,
    pub task: TaskKind,
    pub question: String,
    pub reasoning: Vec<Token>,
    pub score: f64,
    pub provenance: Provenance,
}

impl From<&PlanReasonRecord> for TrainingRecord {
    fn from(r: &PlanReasonRecord) -> Self {
        Self {
            item_id: r.item_id.clone(),
            task: r.task,
            question: r.question.clone(),
            reasoning: r.reasoning_tokens.clone(),
            score: r.final_score,
            provenance: r.provenance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RejectionPolicy {
    /// Teacher samples per item.
    pub samples_per_item: usize,
    /// A candidate passes when its Gaussian reward reaches this value.
    pub accept_reward_min: f64,
    /// Maximum passing candidates exported per kept item.
    pub keep_per_item: usize,
}

impl Default for RejectionPolicy {
    fn default() -> Self {
        Self {
            samples_per_item: 8,
            accept_reward_min: 0.7,
            keep_per_item: 2,
        }
    }
}

impl RejectionPolicy {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |m: String| Err(DatasetError::Config(m));
        if self.samples_per_item == 0 {
            return fail("samples_per_item must be positive".into());
        }
        if !(self.accept_reward_min > 0.0 && self.accept_reward_min <= 1.0) {
            return fail(format!("accept_reward_min must lie in (0, 1], got {}", self.accept_reward_min));
        }
        if self.keep_per_item == 0 || self.keep_per_item > self.samples_per_item {
            return fail(format!(
                "keep_per_item must lie in 1..={}, got {}",
                self.samples_per_item, self.keep_per_item
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("teacher failed on `{item_id}`: {reason}")]
pub struct TeacherError {
    pub item_id: String,
    pub reason: String,
}

/// Produces one plan-then-reason response for an item.
pub trait Teacher: Sync {
    fn respond(&self, item: &ToyItem, rng: &mut dyn rand::RngCore) -> Result<PlanReasonRecord, TeacherError>;

    /// Called once per item before any candidate is drawn.
    fn available(&self, _item: &ToyItem, _rng: &mut dyn rand::RngCore) -> Result<(), TeacherError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub noise_sigma: f64,
    /// Additive bias per task, indexed technical, aesthetic, alignment.
    pub task_bias: [f64; 3],
    pub reasoning_len: usize,
    /// Chance that the teacher fails outright on an item.
    pub failure_prob: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.4,
            task_bias: [0.0, 0.1, -0.1],
            reasoning_len: 6,
            failure_prob: 0.0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DatasetError::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.failure_prob) {
            return Err(DatasetError::Config(format!("failure_prob must lie in [0, 1], got {}", self.failure_prob)));
        }
        if self.task_bias.iter().any(|b| !b.is_finite()) {
            return Err(DatasetError::Config("task_bias must be finite".into()));
        }
        Ok(())
    }
}

/// Scores `truth + N(0, noise_sigma) + bias[task]`, snapped to the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatedTeacher {
    pub config: TeacherConfig,
    pub vocab: Vocabulary,
}

pub fn question_for(item: &ToyItem) -> String {
    format!("Rate the {} quality of item {} on a 1-5 scale.", item.task, item.id)
}

impl Teacher for SimulatedTeacher {
    fn available(&self, item: &ToyItem, rng: &mut dyn rand::RngCore) -> Result<(), TeacherError> {
        let p = self.config.failure_prob;
        if p > 0.0 && rng.random::<f64>() < p {
            return Err(TeacherError {
                item_id: item.id.clone(),
                reason: "simulated teacher outage".into(),
            });
        }
        Ok(())
    }

    fn respond(&self, item: &ToyItem, rng: &mut dyn rand::RngCore) -> Result<PlanReasonRecord, TeacherError> {
        let noise: f64 = StandardNormal.sample(rng);
        let cfg = &self.config;
        let raw = item.truth + cfg.noise_sigma * noise + cfg.task_bias[item.task.index()];
        let reasoning_tokens = (0..cfg.reasoning_len)
            .map(|_| rng.random_range(0..self.vocab.reason_tokens) as Token)
            .collect();
        Ok(PlanReasonRecord {
            item_id: item.id.clone(),
            task: item.task,
            question: question_for(item),
            plan: format!("1. inspect {} cues 2. weigh evidence 3. map to the scale", item.task),
            reasoning_tokens,
            final_score: self.vocab.grid.snap(raw),
            provenance: Provenance::Teacher,
        })
    }
}

/// `k` independent teacher responses for one item.
pub fn generate_candidates(
    item: &ToyItem,
    teacher: &dyn Teacher,
    k: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<PlanReasonRecord>, TeacherError> {
    teacher.available(item, rng)?;
    (0..k).map(|_| teacher.respond(item, rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disposition {
    Easy,
    Hard,
    Kept,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub item_id: String,
    pub task: TaskKind,
    pub disposition: Disposition,
    pub candidates: usize,
    pub passed: usize,
    pub exported: usize,
}

/// Applies the easy/hard/keep rule to one item's candidates.
///
/// Kept candidates are the passing ones ordered by reward, highest first,
/// with the lower candidate index breaking ties.
/// The Gaussian reward with `reward.sigma` decides passing, whatever
/// `reward.kind` is.
pub fn filter_item(
    item: &ToyItem,
    candidates: &[PlanReasonRecord],
    policy: &RejectionPolicy,
    reward: &RewardSpec,
) -> (Vec<TrainingRecord>, LedgerEntry) {
    let mut passing: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let r = gaussian_reward(c.final_score, item.truth, reward.sigma).unwrap_or(0.0);
            (r >= policy.accept_reward_min).then_some((i, r))
        })
        .collect();
    let disposition = if passing.len() == candidates.len() {
        Disposition::Easy
    } else if passing.is_empty() {
        Disposition::Hard
    } else {
        Disposition::Kept
    };
    let kept: Vec<TrainingRecord> = if disposition == Disposition::Kept {
        passing.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        passing
            .iter()
            .take(policy.keep_per_item)
            .map(|&(i, _)| TrainingRecord::from(&candidates[i]))
            .collect()
    } else {
        Vec::new()
    };
    let entry = LedgerEntry {
        item_id: item.id.clone(),
        task: item.task,
        disposition,
        candidates: candidates.len(),
        passed: passing.len(),
        exported: kept.len(),
    };
    (kept, entry)
}

const DATASET_STREAM: u64 = 0x4453;

/// Generates and filters candidates for every item. Each item draws from its
/// own seeded stream, so the result does not depend on thread scheduling.
pub fn build_corpus(
    items: &[ToyItem],
    teacher: &dyn Teacher,
    policy: &RejectionPolicy,
    reward: &RewardSpec,
    seed: u64,
    deterministic: bool,
) -> Result<(Vec<TrainingRecord>, Vec<LedgerEntry>), DatasetError> {
    policy.validate()?;
    reward.validate().map_err(|e| DatasetError::Config(e.to_string()))?;
    let one = |(i, item): (usize, &ToyItem)| {
        let mut r = rng::stream(seed, &[DATASET_STREAM, i as u64]);
        match generate_candidates(item, teacher, policy.samples_per_item, &mut r) {
            Ok(c) => filter_item(item, &c, policy, reward),
            Err(_) => (
                Vec::new(),
                LedgerEntry {
                    item_id: item.id.clone(),
                    task: item.task,
                    disposition: Disposition::Skipped,
                    candidates: 0,
                    passed: 0,
                    exported: 0,
                },
            ),
        }
    };
    let per_item: Vec<_> = if deterministic {
        items.iter().enumerate().map(one).collect()
    } else {
        items.par_iter().enumerate().map(one).collect()
    };
    let (records, ledger): (Vec<Vec<TrainingRecord>>, Vec<LedgerEntry>) = per_item.into_iter().unzip();
    Ok((records.into_iter().flatten().collect(), ledger))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: usize,
    pub items: usize,
    pub records_per_task: BTreeMap<TaskKind, usize>,
    pub items_per_disposition: BTreeMap<Disposition, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Manifest {
    pub fn from_parts(records: &[TrainingRecord], ledger: &[LedgerEntry]) -> Self {
        let mut records_per_task: BTreeMap<TaskKind, usize> = TaskKind::ALL.iter().map(|&t| (t, 0)).collect();
        for r in records {
            *records_per_task.entry(r.task).or_default() += 1;
        }
        let mut items_per_disposition: BTreeMap<Disposition, usize> =
            [Disposition::Easy, Disposition::Hard, Disposition::Kept, Disposition::Skipped]
                .into_iter()
                .map(|d| (d, 0))
                .collect();
        for e in ledger {
            *items_per_disposition.entry(e.disposition).or_default() += 1;
        }
        Self {
            records: records.len(),
            items: ledger.len(),
            records_per_task,
            items_per_disposition,
            config_hash: None,
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| DatasetError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|source| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(rows)
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes corpus, rejection ledger and manifest into `dir`, creating it if
/// needed.
pub fn export_corpus(
    dir: &Path,
    records: &[TrainingRecord],
    ledger: &[LedgerEntry],
    config_hash: Option<String>,
) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_jsonl(&dir.join(CORPUS_FILE), records)?;
    write_jsonl(&dir.join(LEDGER_FILE), ledger)?;
    let manifest = Manifest {
        config_hash,
        ..Manifest::from_parts(records, ledger)
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn import_corpus(path: &Path) -> Result<Vec<TrainingRecord>, DatasetError> {
    read_jsonl(path)
}

/// Joins corpus records with their items and appends the score token, giving
/// supervised trajectories.
pub fn sft_pairs(
    records: &[TrainingRecord],
    items: &[ToyItem],
    vocab: &Vocabulary,
) -> Result<Vec<(ToyItem, Vec<Token>)>, DatasetError> {
    let by_id: HashMap<&str, &ToyItem> = items.iter().map(|i| (i.id(), i)).collect();
    records
        .iter()
        .map(|r| {
            let fail = |reason: String| DatasetError::Record {
                item_id: r.item_id.clone(),
                reason,
            };
            let item = by_id.get(r.item_id.as_str()).ok_or_else(|| fail("no matching item".into()))?;
            let score = vocab.encode(r.score).ok_or_else(|| fail(format!("score {} is off the grid", r.score)))?;
            if let Some(t) = r.reasoning.iter().find(|&&t| !vocab.is_reason(t)) {
                return Err(fail(format!("token {t} is not a reason token")));
            }
            let mut tokens = r.reasoning.clone();
            tokens.push(score);
            Ok(((*item).clone(), tokens))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ScoreGrid;
    use crate::toy::{ToyConfig, ToyEnv};

    fn items(n: usize) -> Vec<ToyItem> {
        ToyEnv::new(ToyConfig::default(), ScoreGrid::default()).items(0, n)
    }

    fn rs() -> RewardSpec {
        RewardSpec::default()
    }

    fn teacher() -> SimulatedTeacher {
        SimulatedTeacher {
            config: TeacherConfig::default(),
            vocab: Vocabulary::default(),
        }
    }

    fn candidate(score: f64) -> PlanReasonRecord {
        PlanReasonRecord {
            item_id: "x".into(),
            task: TaskKind::Technical,
            question: "q".into(),
            plan: "p".into(),
            reasoning_tokens: vec![1],
            final_score: score,
            provenance: Provenance::Teacher,
        }
    }

    fn item(truth: f64) -> ToyItem {
        ToyItem {
            id: "x".into(),
            task: TaskKind::Technical,
            features: vec![],
            truth,
        }
    }

    #[test]
    fn zero_noise_teacher_returns_truth() {
        let t = SimulatedTeacher {
            config: TeacherConfig {
                noise_sigma: 0.0,
                task_bias: [0.0; 3],
                ..TeacherConfig::default()
            },
            vocab: Vocabulary::default(),
        };
        let it = &items(1)[0];
        let c = generate_candidates(it, &t, 8, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(c.len(), 8);
        assert!(c.iter().all(|r| r.final_score == it.truth));
    }

    #[test]
    fn easy_hard_and_kept() {
        let p = RejectionPolicy::default();
        let (kept, e) = filter_item(&item(3.0), &[candidate(3.0), candidate(3.1)], &p, &rs());
        assert_eq!((kept.len(), e.disposition), (0, Disposition::Easy));
        let (kept, e) = filter_item(&item(3.0), &[candidate(1.0), candidate(5.0)], &p, &rs());
        assert_eq!((kept.len(), e.disposition), (0, Disposition::Hard));
        let k1 = RejectionPolicy {
            samples_per_item: 1,
            keep_per_item: 1,
            ..p
        };
        let (_, e) = filter_item(&item(3.0), &[candidate(3.0)], &k1, &rs());
        assert_eq!(e.disposition, Disposition::Easy);
    }

    #[test]
    fn keeps_top_m_by_reward_then_index() {
        // passing: idx 1 (err .2), 4 (err .1), 6 (err .1); others fail
        let scores = [1.0, 3.2, 5.0, 1.2, 2.9, 4.9, 3.1, 1.1];
        let mut c: Vec<PlanReasonRecord> = scores.iter().map(|&s| candidate(s)).collect();
        for (i, r) in c.iter_mut().enumerate() {
            r.reasoning_tokens = vec![i as Token];
        }
        let (kept, e) = filter_item(&item(3.0), &c, &RejectionPolicy::default(), &rs());
        assert_eq!(e.passed, 3);
        assert_eq!(e.disposition, Disposition::Kept);
        let chosen: Vec<Token> = kept.iter().map(|r| r.reasoning[0]).collect();
        // |2.9-3| and |3.1-3| differ in the last bit; recompute the order directly
        let r4 = gaussian_reward(2.9, 3.0, 0.8).unwrap();
        let r6 = gaussian_reward(3.1, 3.0, 0.8).unwrap();
        let expect = if r6 > r4 { vec![6, 4] } else { vec![4, 6] };
        assert_eq!(chosen, expect);
    }

    #[test]
    fn seeded_noisy_teacher_mixes_pass_and_fail() {
        let it = item(3.0);
        let c = generate_candidates(&it, &teacher(), 8, &mut rng::stream(11, &[])).unwrap();
        let (_, e) = filter_item(&it, &c, &RejectionPolicy::default(), &rs());
        assert!(e.passed > 0 && e.passed < 8, "{e:?}");
    }

    #[test]
    fn partition_and_determinism() {
        let data = items(60);
        let teacher = SimulatedTeacher {
            config: TeacherConfig {
                failure_prob: 0.1,
                ..TeacherConfig::default()
            },
            vocab: Vocabulary::default(),
        };
        let p = RejectionPolicy::default();
        let (a, la) = build_corpus(&data, &teacher, &p, &rs(), 3, false).unwrap();
        let (b, lb) = build_corpus(&data, &teacher, &p, &rs(), 3, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.len(), data.len());
        assert!(la.iter().any(|e| e.disposition == Disposition::Skipped));
        let m = Manifest::from_parts(&a, &la);
        assert_eq!(m.items_per_disposition.values().sum::<usize>(), 60);
        assert_eq!(m.records_per_task.values().sum::<usize>(), a.len());
    }

    #[test]
    fn raising_acceptance_is_monotone() {
        let data = items(80);
        let teacher = teacher();
        let mut last: Option<(usize, usize)> = None;
        for r_keep in [0.3, 0.5, 0.7, 0.9, 1.0] {
            let p = RejectionPolicy {
                accept_reward_min: r_keep,
                ..RejectionPolicy::default()
            };
            let (_, ledger) = build_corpus(&data, &teacher, &p, &rs(), 9, true).unwrap();
            let easy = ledger.iter().filter(|e| e.disposition == Disposition::Easy).count();
            let hard = ledger.iter().filter(|e| e.disposition == Disposition::Hard).count();
            if let Some((e0, h0)) = last {
                assert!(easy <= e0 && hard >= h0);
            }
            last = Some((easy, hard));
        }
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (recs, ledger) = build_corpus(&items(30), &teacher(), &RejectionPolicy::default(), &rs(), 2, true).unwrap();
        let m = export_corpus(dir.path(), &recs, &ledger, None).unwrap();
        assert_eq!(m.records, recs.len());
        let back = import_corpus(&dir.path().join(CORPUS_FILE)).unwrap();
        assert_eq!(back, recs);
        let text = fs::read_to_string(dir.path().join(CORPUS_FILE)).unwrap();
        assert!(!text.contains("plan"));

        let empty = tempfile::tempdir().unwrap();
        let m = export_corpus(empty.path(), &[], &[], None).unwrap();
        assert_eq!(m.records, 0);
        assert!(m.records_per_task.values().all(|&c| c == 0));
        assert_eq!(fs::read_to_string(empty.path().join(CORPUS_FILE)).unwrap(), "");
    }

    #[test]
    fn sft_pairs_append_score_token() {
        let data = items(5);
        let vocab = Vocabulary::default();
        let rec = TrainingRecord {
            item_id: data[2].id.clone(),
            task: data[2].task,
            question: question_for(&data[2]),
            reasoning: vec![0, 3],
            score: 3.3,
            provenance: Provenance::Teacher,
        };
        let pairs = sft_pairs(std::slice::from_ref(&rec), &data, &vocab).unwrap();
        assert_eq!(pairs[0].1, vec![0, 3, vocab.encode(3.3).unwrap()]);
        let bad = TrainingRecord {
            item_id: "missing".into(),
            ..rec
        };
        assert!(sft_pairs(&[bad], &data, &vocab).is_err());
    }
}
