use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ahrs_core::harness::{self, ClientFactory, HarnessError};
use ahrs_core::llm_client::{record_session, ChatClient, ScriptedChatClient};
use ahrs_core::trainer::{Algo, SelectorChoice, TrainConfig};

fn ahrs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ahrs"))
        .args(args)
        .env_remove("LLM_API_KEY")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const QUICK: &str = "total_epochs = 6\nsteps_per_epoch = 32\nnum_envs = 2\nhidden = [8]\nminibatch_size = 16\nupdate_epochs = 1\nschedule_period = 2\n";

fn write_config(dir: &Path) -> String {
    let p = dir.join("quick.toml");
    fs::write(&p, QUICK).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(ahrs(&[]).status.code(), Some(1));
    assert_eq!(ahrs(&["train"]).status.code(), Some(1));
    assert_eq!(ahrs(&["train", "--out", "x", "--algo", "sac"]).status.code(), Some(1));
    assert_eq!(ahrs(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_2() {
    let o = ahrs(&["env", "describe", "cartpole"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));
    let dir = tempfile::tempdir().unwrap();
    let o = ahrs(&["summarize", "--runs", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn env_describe_lists_components() {
    let o = ahrs(&["env", "describe", "point-mass-nav"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("name: point-mass-nav"));
    assert!(text.contains("reward components (K = 4)"));
    assert!(text.contains("expression variables:"));
    assert!(ahrs(&["env", "describe", "pendulum-decomposed"]).status.success());
}

#[test]
fn rules_list_has_eight() {
    let o = ahrs(&["rules", "list"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for n in 1..=8 {
        assert!(text.contains(&format!("[{n}] ")), "rule {n} missing:\n{text}");
    }
}

#[test]
fn prompts_print() {
    for kind in ["repo", "selection", "aux"] {
        let o = ahrs(&["prompt", kind]);
        assert!(o.status.success(), "{kind}: {}", stderr(&o));
        assert!(!stdout(&o).trim().is_empty());
    }
    let sel = stdout(&ahrs(&["prompt", "selection"]));
    assert!(sel.contains("~[n]~"));
    assert!(sel.contains("Nothing has been chosen yet in this run."));
}

#[test]
fn train_then_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("runs");
    let out_s = out.to_str().unwrap();
    for algo in ["ppo", "ahrs-r"] {
        let o = ahrs(&["train", "--config", &cfg, "--algo", algo, "--seed", "1,2", "--out", out_s]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("completed"));
    }
    assert!(out.join("ppo_point-mass-nav_seed2").join("metrics.csv").is_file());
    let o = ahrs(&["summarize", "--runs", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("ppo") && text.contains("ahrs-r"));
    assert!(out.join("summary.csv").is_file());
}

#[test]
fn llm_without_key_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("runs");
    let o = ahrs(&["train", "--config", &cfg, "--algo", "ahrs", "--selector", "llm", "--seed", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("LLM_API_KEY"));
}

#[test]
fn failing_aux_expression_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("runs");
    let o = ahrs(&[
        "train", "--config", &cfg, "--algo", "hd-ppo-a", "--aux-expr", "1/(step-3)", "--seed", "1", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("failed"));
    assert!(out.join("hd-ppo-a_point-mass-nav_seed1").join("run.json").is_file());
}

struct Scripted;

impl ClientFactory for Scripted {
    fn client(&self, _cfg: &TrainConfig, run_dir: &Path) -> Result<Option<(Box<dyn ChatClient>, PathBuf)>, HarnessError> {
        let path = run_dir.join(harness::TRANSCRIPT_FILE);
        let client = record_session(ScriptedChatClient::from_texts(&["~[4]~", "~[2]~", "hmm"]), &path)?;
        Ok(Some((Box::new(client), path)))
    }
}

#[test]
fn replay_verify_checks_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = harness::parse_config(QUICK).unwrap();
    cfg.algo = Algo::Ahrs;
    cfg.selector = SelectorChoice::Llm;
    let run = harness::run_single(&cfg, &dir.path().join("run"), &Scripted).unwrap();
    let transcript = run.transcript_path.unwrap();
    let config = dir.path().join("run").join(harness::CONFIG_FILE);
    let (t, c) = (transcript.to_str().unwrap(), config.to_str().unwrap());

    let o = ahrs(&["replay", "verify", "--transcript", t, "--config", c]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("3 tick(s)"));

    let o = ahrs(&["replay", "verify", "--transcript", t, "--config", c, "--seed", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("drift"), "{}", stderr(&o));

    let missing = dir.path().join("none.jsonl");
    let o = ahrs(&["replay", "verify", "--transcript", missing.to_str().unwrap(), "--config", c]);
    assert_eq!(o.status.code(), Some(2));

    // the same transcript drives a replayed training run from the CLI
    let out = dir.path().join("replayed");
    let o = ahrs(&["train", "--config", c, "--selector", "replay", "--transcript", t, "--seed", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("ahrs_point-mass-nav_seed1").join("metrics.csv")).unwrap(),
        fs::read(run.metrics_path).unwrap()
    );
}
