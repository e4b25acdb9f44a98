use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Checkpoint, CliError, RunConfig};
use crate::dataset::{
    build_corpus, export_corpus, import_corpus, read_jsonl, sft_pairs, write_jsonl, Disposition, SimulatedTeacher,
    CORPUS_FILE,
};
use crate::grpo::{run_training, CheckpointSink, EpochReport, StepReport, TrainState, TrainingLog};
use crate::item::ToyItem;
use crate::metrics::{evaluate, EvalReport, Prediction};
use crate::policy::{sft_fit, Architecture, PolicyParams};
use crate::rng;
use crate::toy::{render_response, ToyEnv};
use crate::tts::{mock, select as select_prompt, Prompt, ScoreFeedback, TranscriptRecord};

pub const TRAIN_SPLIT: u64 = 0;
pub const EVAL_SPLIT: u64 = 1;
const INIT_STREAM: u64 = 0x494e_4954;

fn mkdir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Timestamps go here and nowhere else, so the other artifacts stay
/// byte-identical across repeated runs.
fn sidecar(cfg: &RunConfig, command: &str, message: &str) {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let path = cfg.output.join("run.log");
    if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(path) {
        let _ = writeln!(f, "{secs} {command} {message}");
    }
}

fn env(cfg: &RunConfig) -> ToyEnv {
    ToyEnv::new(cfg.toy, cfg.vocab.grid)
}

fn init_policy(cfg: &RunConfig) -> Result<PolicyParams, CliError> {
    let mut r = rng::stream(cfg.seed, &[INIT_STREAM]);
    let d = cfg.toy.feature_dim;
    Ok(match &cfg.policy.architecture {
        Architecture::Tabular => PolicyParams::tabular_random(cfg.vocab, d, cfg.policy.init_scale, &mut r),
        Architecture::Mlp { hidden } => PolicyParams::mlp_random(cfg.vocab, d, hidden, &mut r)?,
    })
}

fn check_policy(cfg: &RunConfig, p: &PolicyParams, path: &Path) -> Result<(), CliError> {
    if p.vocab != cfg.vocab || p.feature_dim != cfg.toy.feature_dim {
        return Err(CliError::Config(format!(
            "{}: checkpoint vocabulary or feature dimension differs from the config",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct Meta<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
}

fn write_meta(cfg: &RunConfig, dir: &Path, command: &str) -> Result<(), CliError> {
    write_json(
        &dir.join("meta.json"),
        &Meta {
            command,
            config_hash: cfg.hash(),
            seed: cfg.seed,
        },
    )?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(&path, e))
}

pub fn init(cfg: &RunConfig) -> Result<(), CliError> {
    mkdir(&cfg.output)?;
    let path = cfg.output.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn build_dataset(cfg: &RunConfig, deterministic: bool) -> Result<(), CliError> {
    let items = env(cfg).items(TRAIN_SPLIT, cfg.data.train_items);
    let teacher = SimulatedTeacher {
        config: cfg.dataset.teacher,
        vocab: cfg.vocab,
    };
    let (records, ledger) = build_corpus(&items, &teacher, &cfg.dataset.rejection, &cfg.reward, cfg.seed, deterministic)?;
    let dir = cfg.output.join("dataset");
    let manifest = export_corpus(&dir, &records, &ledger, Some(cfg.hash()))?;
    write_meta(cfg, &dir, "build-dataset")?;
    let count = |d: Disposition| manifest.items_per_disposition.get(&d).copied().unwrap_or(0);
    if count(Disposition::Hard) * 2 > manifest.items {
        eprintln!(
            "warning: {} of {} items were dropped as too hard; consider lowering accept_reward_min",
            count(Disposition::Hard),
            manifest.items
        );
    }
    println!(
        "corpus: {} records from {} items (easy {}, hard {}, kept {}, skipped {}) -> {}",
        manifest.records,
        manifest.items,
        count(Disposition::Easy),
        count(Disposition::Hard),
        count(Disposition::Kept),
        count(Disposition::Skipped),
        dir.display()
    );
    sidecar(cfg, "build-dataset", &format!("{} records", manifest.records));
    Ok(())
}

fn corpus_path(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.data.corpus.clone())
        .unwrap_or_else(|| cfg.output.join("dataset").join(CORPUS_FILE))
}

fn fit_corpus(cfg: &RunConfig, policy: PolicyParams, corpus: &Path) -> Result<(PolicyParams, Vec<f64>), CliError> {
    let records = import_corpus(corpus)?;
    let items = env(cfg).items(TRAIN_SPLIT, cfg.data.train_items);
    let pairs = sft_pairs(&records, &items, &cfg.vocab)?;
    if pairs.is_empty() {
        return Err(CliError::Data(format!("{}: corpus is empty", corpus.display())));
    }
    let (policy, report) = sft_fit(policy, &pairs, cfg.sft.epochs, cfg.sft.lr)?;
    let mut losses = report.epoch_losses;
    losses.push(report.final_loss);
    Ok((policy, losses))
}

pub fn sft(cfg: &RunConfig, corpus: Option<PathBuf>) -> Result<(), CliError> {
    let corpus = corpus_path(cfg, corpus);
    let (policy, losses) = fit_corpus(cfg, init_policy(cfg)?, &corpus)?;
    let dir = cfg.output.join("sft");
    mkdir(&dir)?;
    write_meta(cfg, &dir, "sft")?;
    let path = dir.join("policy.json");
    Checkpoint::policy_only(policy, &cfg.hash(), cfg.seed)
        .write(&path)
        .map_err(|e| CliError::io(&path, e))?;
    write_json(&dir.join("losses.json"), &losses)?;
    println!(
        "sft: nll {:.4} -> {:.4} over {} epochs -> {}",
        losses[0],
        losses[losses.len() - 1],
        cfg.sft.epochs,
        path.display()
    );
    sidecar(cfg, "sft", &corpus.display().to_string());
    Ok(())
}

struct FileSink {
    dir: PathBuf,
    hash: String,
    seed: u64,
}

impl FileSink {
    fn write_logs(&self, log: &TrainingLog) -> std::io::Result<()> {
        let to_io = |e: crate::dataset::DatasetError| std::io::Error::other(e.to_string());
        write_jsonl(&self.dir.join("steps.jsonl"), &log.steps).map_err(to_io)?;
        write_jsonl(&self.dir.join("epochs.jsonl"), &log.epochs).map_err(to_io)
    }
}

impl CheckpointSink<PolicyParams> for FileSink {
    fn save(&mut self, state: &TrainState<PolicyParams>, log: &TrainingLog) -> std::io::Result<()> {
        self.write_logs(log)?;
        let path = self
            .dir
            .join("checkpoints")
            .join(format!("epoch-{:03}.json", state.epochs_done));
        Checkpoint::from_state(state, &self.hash, self.seed).write(&path)
    }
}

pub fn train(
    cfg: &RunConfig,
    deterministic: bool,
    init_checkpoint: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<(), CliError> {
    let tcfg = cfg.train_config(deterministic);
    let items = env(cfg).items(TRAIN_SPLIT, cfg.data.train_items);
    let dir = cfg.output.join("train");
    mkdir(&dir)?;
    let hash = cfg.hash();

    let (mut state, mut log) = if let Some(path) = &resume {
        let ck = Checkpoint::read(path)?;
        if ck.config_hash != hash {
            return Err(CliError::Config(format!(
                "{}: checkpoint was written under a different config (hash {})",
                path.display(),
                ck.config_hash
            )));
        }
        let mut log = TrainingLog::default();
        let steps = dir.join("steps.jsonl");
        if steps.exists() {
            log.steps = read_jsonl::<StepReport>(&steps)?;
            log.steps.truncate(ck.global_step as usize);
        }
        let epochs = dir.join("epochs.jsonl");
        if epochs.exists() {
            log.epochs = read_jsonl::<EpochReport>(&epochs)?;
            log.epochs.truncate(ck.epochs_done);
        }
        (ck.into_state(tcfg.optimizer), log)
    } else if let Some(path) = &init_checkpoint {
        let ck = Checkpoint::read(path)?;
        check_policy(cfg, &ck.policy, path)?;
        (TrainState::new(ck.policy, tcfg.optimizer), TrainingLog::default())
    } else {
        let mut policy = init_policy(cfg)?;
        if let Some(corpus) = &cfg.data.corpus {
            policy = fit_corpus(cfg, policy, corpus)?.0;
        }
        (TrainState::new(policy, tcfg.optimizer), TrainingLog::default())
    };
    write_meta(cfg, &dir, "train")?;

    let mut sink = FileSink {
        dir: dir.clone(),
        hash: hash.clone(),
        seed: cfg.seed,
    };
    sink.write_logs(&log).map_err(|e| CliError::io(&dir, e))?;
    run_training(&items, cfg.schedule, &tcfg, cfg.seed, &mut state, &mut log, &mut sink)?;

    let final_path = dir.join("final.json");
    Checkpoint::from_state(&state, &hash, cfg.seed)
        .write(&final_path)
        .map_err(|e| CliError::io(&final_path, e))?;
    for e in &log.epochs {
        println!(
            "epoch {} [{}] reward {:.4} retained {:.3} gated-in {:.3} entropy {:.4}",
            e.epoch, e.stage, e.mean_reward, e.retained_fraction, e.gated_in_fraction, e.mean_entropy
        );
    }
    println!("final checkpoint -> {}", final_path.display());
    sidecar(cfg, "train", &format!("{} steps", log.steps.len()));
    Ok(())
}

#[derive(Debug, Clone, Deserialize)]
struct PredictionRecord {
    item_id: String,
    #[serde(default)]
    response_text: Option<String>,
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    config_hash: String,
    source: String,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>, predictions: Option<PathBuf>) -> Result<(), CliError> {
    let items: Vec<ToyItem> = env(cfg).items(EVAL_SPLIT, cfg.data.eval_items);
    let predictions = predictions.or_else(|| cfg.data.predictions.clone());
    let (report, source) = if let Some(path) = predictions {
        let rows: Vec<PredictionRecord> = read_jsonl(&path)?;
        let by_id: HashMap<String, PredictionRecord> = rows.into_iter().map(|r| (r.item_id.clone(), r)).collect();
        let predictor = |it: &ToyItem| match by_id.get(&it.id) {
            Some(PredictionRecord { score: Some(s), .. }) => Ok(Prediction::Score(*s)),
            Some(PredictionRecord {
                response_text: Some(t), ..
            }) => Ok(Prediction::Text(t.clone())),
            _ => Err(format!("no prediction for {}", it.id)),
        };
        let r = evaluate("toy-heldout", &items, &predictor, cfg.eval.range);
        (r, path.display().to_string())
    } else {
        let (policy, source) = match &checkpoint {
            Some(path) => {
                let ck = Checkpoint::read(path)?;
                check_policy(cfg, &ck.policy, path)?;
                (ck.policy, path.display().to_string())
            }
            None => (init_policy(cfg)?, "untrained".to_string()),
        };
        let predictor = |it: &ToyItem| Ok(Prediction::Text(render_response(&policy, it)));
        (evaluate("toy-heldout", &items, &predictor, cfg.eval.range), source)
    };
    let dir = cfg.output.join("eval");
    mkdir(&dir)?;
    write_meta(cfg, &dir, "eval")?;
    write_json(
        &dir.join("report.json"),
        &EvalOutput {
            config_hash: cfg.hash(),
            source,
            report: &report,
        },
    )?;
    let show = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    println!(
        "eval: {} items, {} parse failures, plcc {}, srcc {}",
        report.overall.n_items,
        report.overall.n_parse_failures,
        show(report.overall.plcc),
        show(report.overall.srcc)
    );
    sidecar(cfg, "eval", &show(report.overall.srcc));
    Ok(())
}

#[derive(Serialize)]
struct Winner {
    prompt_id: String,
    artifact: String,
    combined: f64,
    generation_round: usize,
}

pub fn select(cfg: &RunConfig, prompts: Option<PathBuf>) -> Result<(), CliError> {
    let prompts: Vec<Prompt> = match prompts.or_else(|| cfg.data.prompts.clone()) {
        Some(path) => read_jsonl(&path)?,
        None => (0..cfg.select.synthetic_prompts)
            .map(|i| Prompt {
                id: format!("p{i:03}"),
                text: format!("synthetic prompt {i}"),
            })
            .collect(),
    };
    let generator = mock::MockGenerator {
        seed: cfg.seed,
        delta: cfg.select.mock_delta,
    };
    let scorer = mock::MockScorer::Quality;
    let mut transcript: Vec<TranscriptRecord> = Vec::new();
    let mut winners = Vec::new();
    for p in &prompts {
        let (best, rows) = select_prompt(p, &generator, &scorer, &cfg.tts, &ScoreFeedback)?;
        transcript.extend(rows);
        winners.push(Winner {
            prompt_id: p.id.clone(),
            artifact: best.artifact,
            combined: best.combined,
            generation_round: best.generation_round,
        });
    }
    let dir = cfg.output.join("select");
    mkdir(&dir)?;
    write_meta(cfg, &dir, "select")?;
    write_jsonl(&dir.join("transcripts.jsonl"), &transcript)?;
    write_json(&dir.join("winners.json"), &winners)?;
    println!("select: {} prompts, {} transcript rows -> {}", prompts.len(), transcript.len(), dir.display());
    sidecar(cfg, "select", &format!("{} prompts", prompts.len()));
    Ok(())
}
