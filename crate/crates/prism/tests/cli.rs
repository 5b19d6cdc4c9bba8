//! End-to-end checks of the `prism` binary: stage ordering, idempotency,
//! and config validation, all on a tiny pixel-bypass setup.

use std::path::Path;
use std::process::{Command, Output};

use prism::config::{RunConfig, ScheduleConfig};
use prism::denoiser::TrainConfig;
use prism::encoders::{CodecMode, ContrastiveConfig};
use prism::synthdata::CorpusSpec;

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.corpus = CorpusSpec {
        n_samples: 40,
        height: 16,
        width: 16,
        rho: 0.8,
        ..CorpusSpec::default()
    };
    cfg.codec = CodecMode::PixelBypass;
    cfg.schedule = ScheduleConfig {
        total_timesteps: 40,
        num_steps: 5,
        ..ScheduleConfig::default()
    };
    cfg.contrastive = ContrastiveConfig { steps: 20, ..ContrastiveConfig::default() };
    cfg.unet = TrainConfig { steps: 20, batch: 2, ..TrainConfig::default() };
    let path = dir.join("config.json");
    cfg.save(&path).unwrap();
    path
}

fn prism(dir: &Path, cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prism"))
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_checkpoint_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(prism(dir.path(), &cfg, &["gen-data"]).status.success());
    // train-unet before train-ae must name the absent autoencoder checkpoint.
    let out = prism(dir.path(), &cfg, &["train-unet"]);
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(err.contains("missing checkpoint"), "stderr: {err}");
    assert!(err.contains("ae.prsm"), "stderr: {err}");
}

#[test]
fn second_run_refuses_without_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(prism(dir.path(), &cfg, &["gen-data"]).status.success());
    let again = prism(dir.path(), &cfg, &["gen-data"]);
    assert!(!again.status.success());
    assert!(stderr_of(&again).contains("--overwrite"), "stderr: {}", stderr_of(&again));
    let forced = prism(dir.path(), &cfg, &["--overwrite", "gen-data"]);
    assert!(forced.status.success(), "stderr: {}", stderr_of(&forced));
}

#[test]
fn unknown_config_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["mystery_knob"] = serde_json::json!(3);
    std::fs::write(&cfg, serde_json::to_string(&v).unwrap()).unwrap();
    let out = prism(dir.path(), &cfg, &["gen-data"]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("mystery_knob"), "stderr: {}", stderr_of(&out));
}

#[test]
fn run_log_records_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(prism(dir.path(), &cfg, &["gen-data"]).status.success());
    assert!(prism(dir.path(), &cfg, &["train-ae"]).status.success());
    let log = std::fs::read_to_string(dir.path().join("out/run_log.jsonl")).unwrap();
    let entries: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0]["command"], "gen-data");
    assert_eq!(entries[1]["command"], "train-ae");
    for e in &entries {
        assert!(e["config_hash"].as_str().unwrap().len() == 64);
        assert!(e["seed"].is_u64());
        assert!(e["version"].is_string());
        assert!(e["wall_time_s"].is_number());
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = prism(dir.path(), &cfg, &["--seed", "99", "gen-data"]);
    assert!(out.status.success());
    let log = std::fs::read_to_string(dir.path().join("out/run_log.jsonl")).unwrap();
    let entry: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(entry["seed"], 99);
}
