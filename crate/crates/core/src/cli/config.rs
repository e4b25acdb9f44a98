use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::dataset::{RejectionPolicy, TeacherConfig};
use crate::grpo::{GrpoConfig, Schedule, SgdConfig, TrainConfig};
use crate::metrics::ScoreRange;
use crate::policy::{Architecture, Vocabulary};
use crate::reward::RewardSpec;
use crate::toy::ToyConfig;
use crate::tts::TtsConfig;

pub const ENV_PREFIX: &str = "SCORETUNE__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_items: usize,
    pub eval_items: usize,
    /// SFT corpus; `train` runs SFT on it first when set.
    pub corpus: Option<PathBuf>,
    /// Line-delimited `{item_id, response_text | score}` predictions for `eval`.
    pub predictions: Option<PathBuf>,
    /// Text prompts for `select`, one JSON `{id, text}` per line.
    pub prompts: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_items: 200,
            eval_items: 200,
            corpus: None,
            predictions: None,
            prompts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub architecture: Architecture,
    /// Standard deviation of the random tabular initialization.
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Tabular,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub prefix_len: usize,
    pub updates_per_batch: usize,
    pub optimizer: SgdConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            prefix_len: t.prefix_len,
            updates_per_batch: t.updates_per_batch,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for SftSection {
    fn default() -> Self {
        Self { epochs: 50, lr: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub teacher: TeacherConfig,
    pub rejection: RejectionPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub range: ScoreRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    /// Synthetic prompts to run when no prompt file is given.
    pub synthetic_prompts: usize,
    /// Per-round improvement of the mock generator under feedback.
    pub mock_delta: f64,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self {
            synthetic_prompts: 10,
            mock_delta: 0.125,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub toy: ToyConfig,
    pub vocab: Vocabulary,
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub reward: RewardSpec,
    pub grpo: GrpoConfig,
    pub schedule: Schedule,
    pub train: TrainSection,
    pub sft: SftSection,
    pub dataset: DatasetSection,
    pub eval: EvalSection,
    pub tts: TtsConfig,
    pub select: SelectSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs/default"),
            toy: ToyConfig::default(),
            vocab: Vocabulary::default(),
            data: DataConfig::default(),
            policy: PolicyConfig::default(),
            reward: RewardSpec::default(),
            grpo: GrpoConfig::default(),
            schedule: Schedule::default(),
            train: TrainSection::default(),
            sft: SftSection::default(),
            dataset: DatasetSection::default(),
            eval: EvalSection::default(),
            tts: TtsConfig::default(),
            select: SelectSection::default(),
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Parses `text`, applies `SCORETUNE__SECTION__KEY=value` overrides from
    /// `env`, and deserializes. Errors name the offending key.
    pub fn parse(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, CliError> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for (key, value) in env {
            if let Some(path) = key.strip_prefix(ENV_PREFIX) {
                apply_override(&mut root, path, &value)?;
            }
        }
        let value = toml::Value::Table(root);
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, std::env::vars())
    }

    pub fn train_config(&self, deterministic: bool) -> TrainConfig {
        TrainConfig {
            grpo: self.grpo,
            reward: self.reward,
            optimizer: self.train.optimizer,
            batch_size: self.train.batch_size,
            prefix_len: self.train.prefix_len,
            updates_per_batch: self.train.updates_per_batch,
            deterministic,
        }
    }

    /// Field-level validation of every section.
    pub fn validate(&self) -> Result<(), CliError> {
        let section = |name: &str, r: Result<(), String>| r.map_err(|m| CliError::Config(format!("{name}: {m}")));
        section("vocab", self.vocab.validate())?;
        section("reward", self.reward.validate().map_err(|e| e.to_string()))?;
        section("grpo", self.grpo.validate().map_err(|e| e.to_string()))?;
        section("train", self.train_config(false).validate().map_err(|e| e.to_string()))?;
        section("dataset.teacher", self.dataset.teacher.validate().map_err(|e| e.to_string()))?;
        section("dataset.rejection", self.dataset.rejection.validate().map_err(|e| e.to_string()))?;
        section("tts", self.tts.validate().map_err(|e| e.to_string()))?;
        if self.toy.feature_dim == 0 {
            return section("toy", Err("feature_dim must be positive".into()));
        }
        if !(self.toy.gain.is_finite() && self.toy.bias.is_finite()) {
            return section("toy", Err("gain and bias must be finite".into()));
        }
        if self.data.train_items == 0 {
            return section("data", Err("train_items must be positive".into()));
        }
        if !(self.policy.init_scale >= 0.0 && self.policy.init_scale.is_finite()) {
            return section("policy", Err(format!("init_scale must be >= 0, got {}", self.policy.init_scale)));
        }
        if let Architecture::Mlp { hidden } = &self.policy.architecture {
            if hidden.contains(&0) {
                return section("policy", Err("hidden layer sizes must be positive".into()));
            }
        }
        if !(self.sft.lr > 0.0 && self.sft.lr.is_finite()) {
            return section("sft", Err(format!("lr must be > 0, got {}", self.sft.lr)));
        }
        if self.eval.range.lo.partial_cmp(&self.eval.range.hi) != Some(std::cmp::Ordering::Less) {
            return section("eval", Err("range.lo must be below range.hi".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            output: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes to JSON");
        hex::encode(Sha256::digest(&json))
    }
}

fn apply_override(root: &mut toml::Table, path: &str, raw: &str) -> Result<(), CliError> {
    let keys: Vec<String> = path.split("__").map(|k| k.to_ascii_lowercase()).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("malformed override key {ENV_PREFIX}{path}")));
    }
    let value = parse_scalar(raw);
    let (last, parents) = keys.split_last().expect("at least one key");
    let mut table = root;
    for k in parents {
        let entry = table
            .entry(k.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {ENV_PREFIX}{path}: `{k}` is not a table")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Interprets an override as a TOML value when it parses as one, else as a
/// bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text, []).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("", []).unwrap(), RunConfig::default());
    }

    #[test]
    fn env_overrides_nested_keys() {
        let env = [
            ("SCORETUNE__GRPO__BETA".to_string(), "0.0".to_string()),
            ("SCORETUNE__SEED".to_string(), "17".to_string()),
            ("SCORETUNE__REWARD__KIND".to_string(), "threshold".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let cfg = RunConfig::parse("", env).unwrap();
        assert_eq!(cfg.grpo.beta, 0.0);
        assert_eq!(cfg.seed, 17);
        assert_eq!(cfg.reward.kind, crate::reward::RewardKind::Threshold);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::parse("[grpo]\nbeta = \"high\"\n", []).unwrap_err();
        assert!(err.to_string().contains("grpo.beta"), "{err}");
        let err = RunConfig::parse("[grpo]\nbogus = 1\n", []).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let mut cfg = RunConfig::default();
        cfg.grpo.eps_low = 2.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("grpo") && err.to_string().contains("eps_low"), "{err}");
    }

    #[test]
    fn hash_ignores_output_only() {
        let a = RunConfig::default();
        let b = RunConfig {
            output: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
