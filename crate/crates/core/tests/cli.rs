use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scoretune::cli::{Checkpoint, RunConfig};
use scoretune::toy::ToyEnv;

const SMALL: &str = "seed = 3\n\n[data]\ntrain_items = 24\neval_items = 30\n\n[grpo]\ngroup_size = 8\n\n[train]\nbatch_size = 6\n\n[schedule]\nstage1_epochs = 2\nstage2_epochs = 1\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scoretune"));
    for (k, _) in std::env::vars() {
        if k.starts_with("SCORETUNE__") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--output")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, format!("{SMALL}{extra}")).unwrap();
    (dir, config)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn init_writes_a_loadable_config() {
    let (dir, config) = setup("");
    let out = dir.path().join("out");
    ok(&run(&["init"], &config, &out));
    let written = RunConfig::load(Some(&out.join("config.toml"))).unwrap();
    let original = RunConfig::load(Some(&config)).unwrap();
    assert_eq!(written.seed, 3);
    assert_eq!(written.data.train_items, original.data.train_items);
    assert_eq!(written.to_toml(), RunConfig { output: written.output.clone(), ..original }.to_toml());
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let (dir, config) = setup("");
    let out = dir.path().join("out");
    ok(&run(&["build-dataset", "--deterministic"], &config, &out));
    for f in ["corpus.jsonl", "ledger.jsonl", "manifest.json"] {
        assert!(out.join("dataset").join(f).is_file(), "{f}");
    }
    ok(&run(&["sft"], &config, &out));
    assert!(out.join("sft/policy.json").is_file());
    let losses = json(&out.join("sft/losses.json"));
    let losses: Vec<f64> = serde_json::from_value(losses).unwrap();
    assert!(losses.last().unwrap() < losses.first().unwrap());

    ok(&run(&["train", "--deterministic", "--init-checkpoint", out.join("sft/policy.json").to_str().unwrap()], &config, &out));
    let t = out.join("train");
    for f in ["steps.jsonl", "epochs.jsonl", "final.json", "meta.json", "config.toml"] {
        assert!(t.join(f).is_file(), "{f}");
    }
    for e in 1..=3 {
        assert!(t.join(format!("checkpoints/epoch-{e:03}.json")).is_file());
    }
    let epochs = std::fs::read_to_string(t.join("epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 3);

    ok(&run(&["eval", "--checkpoint", t.join("final.json").to_str().unwrap()], &config, &out));
    let report = json(&out.join("eval/report.json"));
    assert_eq!(report["n_items"], 30);
    assert!(report["srcc"].is_number());
    assert_eq!(report["per_task"].as_object().unwrap().len(), 3);

    ok(&run(&["select"], &config, &out));
    let winners = json(&out.join("select/winners.json"));
    assert_eq!(winners.as_array().unwrap().len(), 10);
    assert!(out.join("select/transcripts.jsonl").is_file());
    assert!(out.join("run.log").is_file());
}

#[test]
fn malformed_config_exits_with_config_code() {
    let (dir, config) = setup("\n[reward]\nsigma = -1.0\n");
    let o = run(&["train"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma"));

    let (dir, config) = setup("\n[sft]\nbogus = 1\n");
    let o = run(&["train"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn env_override_reaches_the_run() {
    let (dir, config) = setup("");
    let out = dir.path().join("out");
    let o = bin()
        .args(["init", "--config"])
        .arg(&config)
        .arg("--output")
        .arg(&out)
        .env("SCORETUNE__REWARD__SIGMA", "0.6")
        .output()
        .unwrap();
    ok(&o);
    let written = RunConfig::load(Some(&out.join("config.toml"))).unwrap();
    assert_eq!(written.reward.sigma, 0.6);

    let o = bin()
        .args(["init", "--config"])
        .arg(&config)
        .arg("--output")
        .arg(&out)
        .env("SCORETUNE__REWARD__SIGMA", "wide")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_data_code() {
    let (dir, config) = setup("");
    let o = run(&["sft", "--corpus", "/nonexistent/corpus.jsonl"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let (dir, config) = setup("");
    let full = dir.path().join("full");
    ok(&run(&["train", "--deterministic"], &config, &full));

    let part = dir.path().join("part");
    ok(&run(&["train", "--deterministic"], &config, &part));
    let ck = part.join("train/checkpoints/epoch-001.json");
    let resumed = Checkpoint::read(&ck).unwrap();
    assert_eq!(resumed.epochs_done, 1);
    ok(&run(&["train", "--deterministic", "--resume", ck.to_str().unwrap()], &config, &part));

    for f in ["steps.jsonl", "epochs.jsonl", "final.json"] {
        assert_eq!(
            std::fs::read(full.join("train").join(f)).unwrap(),
            std::fs::read(part.join("train").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_rejects_a_different_config() {
    let (dir, config) = setup("");
    let out = dir.path().join("out");
    ok(&run(&["train", "--deterministic"], &config, &out));
    let ck = out.join("train/checkpoints/epoch-001.json");
    let other = dir.path().join("other.toml");
    std::fs::write(&other, format!("{SMALL}\n[reward]\nsigma = 0.6\n")).unwrap();
    let o = run(&["train", "--resume", ck.to_str().unwrap()], &other, &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stage_two_runs_from_a_stage_one_checkpoint() {
    let (dir, _) = setup("");
    let out = dir.path().join("s1");
    let s1 = dir.path().join("s1.toml");
    std::fs::write(&s1, SMALL.replace("stage2_epochs = 1", "stage2_epochs = 0")).unwrap();
    ok(&run(&["train", "--deterministic"], &s1, &out));
    let s2 = dir.path().join("s2.toml");
    std::fs::write(&s2, SMALL.replace("stage1_epochs = 2", "stage1_epochs = 0")).unwrap();
    let out2 = dir.path().join("s2");
    ok(&run(
        &["train", "--deterministic", "--init-checkpoint", out.join("train/final.json").to_str().unwrap()],
        &s2,
        &out2,
    ));
    let epochs = std::fs::read_to_string(out2.join("train/epochs.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = epochs.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["stage"], "stage2");
}

#[test]
fn strict_acceptance_threshold_warns() {
    let (dir, config) = setup("\n[dataset.teacher]\nnoise_sigma = 1.0\n\n[dataset.rejection]\naccept_reward_min = 1.0\n");
    let o = run(&["build-dataset"], &config, &dir.path().join("out"));
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn oracle_predictions_score_perfectly() {
    let (dir, config) = setup("");
    let cfg = RunConfig::load(Some(&config)).unwrap();
    let items = ToyEnv::new(cfg.toy, cfg.vocab.grid).items(1, cfg.data.eval_items);
    let preds = dir.path().join("preds.jsonl");
    let rows: Vec<String> = items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            if i % 2 == 0 {
                serde_json::json!({"item_id": it.id, "score": it.truth}).to_string()
            } else {
                serde_json::json!({"item_id": it.id, "response_text": format!("looks fine\nSCORE: {}", it.truth)}).to_string()
            }
        })
        .collect();
    std::fs::write(&preds, rows.join("\n") + "\n").unwrap();
    let out = dir.path().join("out");
    ok(&run(&["eval", "--predictions", preds.to_str().unwrap()], &config, &out));
    let report = json(&out.join("eval/report.json"));
    assert_eq!(report["n_parse_failures"], 0);
    assert!((report["plcc"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((report["srcc"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}
