use std::fs;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn synril(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synril")).args(args).stdin(Stdio::null()).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = r#"
env = "cliff-circular"
method = "ppo_dynamic_bc"
total_steps = 2048
eval_every = 1024
hidden = [16, 16]
demos = "demos.jsonl"
t_reward = 0.0

[ppo]
epochs = 2

[bc]
pretrain_epochs = 2
retrain_epochs = 1
"#;

#[test]
fn collect_scripted_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        let o = synril(&["collect", "--env", "cliff-circular", "--n", "100", "--seed", "4", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 100);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a.jsonl.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["source"], "scripted");
    assert_eq!(meta["trajectories"], 100);
    assert!(meta["calibration"]["epsilon"].is_number());
}

#[test]
fn keyboard_refuses_without_a_terminal() {
    let dir = tempfile::tempdir().unwrap();
    let o = synril(&["collect", "--env", "cliff", "--source", "keyboard", "--out", p(&dir.path().join("k.jsonl"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("terminal"));
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(code(&synril(&["collect", "--env", "moon", "--out", "x"])), 2);
    assert_eq!(code(&synril(&["train", "--config", "/nonexistent.toml", "--out-dir", "/tmp/x"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "env = \"cliff-circular\"\nmethod = \"ppo\"\nbogus = 1\n").unwrap();
    assert_eq!(code(&synril(&["train", "--config", p(&cfg), "--out-dir", p(&dir.path().join("o"))])), 2);
    fs::write(&cfg, "env = \"cliff-circular\"\nmethod = \"static_bc\"\n").unwrap();
    assert_eq!(code(&synril(&["train", "--config", p(&cfg), "--out-dir", p(&dir.path().join("o"))])), 2);
}

#[test]
fn train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let o = synril(&["collect", "--env", "cliff-circular", "--n", "10", "--epsilon", "0.05", "--out", p(&root.join("demos.jsonl"))]);
    assert_eq!(code(&o), 0);
    let cfg = root.join("run.toml");
    fs::write(&cfg, SMALL).unwrap();
    let runs = root.join("runs");
    let o = synril(&["train", "--config", p(&cfg), "--out-dir", p(&runs), "--seeds", "1,2", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for s in ["seed-1", "seed-2"] {
        let run = runs.join(s);
        for f in ["config.toml", "metrics.csv", "best_policy.snnw", "final_policy.snnw", "summary.json", "traces.jsonl"] {
            assert!(run.join(f).exists(), "{s}/{f}");
        }
        assert!(fs::read_to_string(run.join("config.toml")).unwrap().contains(&format!("seed = {}", &s[5..])));
    }

    // A single run with the same seed reproduces the fanned-out metrics.
    let single = root.join("single");
    let o = synril(&["train", "--config", p(&cfg), "--out-dir", p(&single), "--seed", "1", "-q"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(single.join("metrics.csv")).unwrap(), fs::read(runs.join("seed-1/metrics.csv")).unwrap());

    let o = synril(&["export", "--run-dir", p(&runs), "--what", "curves"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let curves = fs::read_to_string(runs.join("curves_mean_ep_reward_100.csv")).unwrap();
    assert!(curves.lines().nth(1).unwrap().starts_with("step,seed-1,seed-2,mean,stderr,n"));
    assert_eq!(curves.lines().count(), 4);

    let weights = runs.join("seed-1/best_policy.snnw");
    let ev = runs.join("seed-1/eval_best.csv");
    let args = ["eval", "--weights", p(&weights), "--env", "cliff-circular", "--seed", "3", "--out", p(&ev)];
    assert_eq!(code(&synril(&args)), 0);
    let first = fs::read(&ev).unwrap();
    assert_eq!(code(&synril(&args)), 0);
    assert_eq!(first, fs::read(&ev).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 51);
    assert!(text.contains("\n# median,"));
    assert!(text.contains("\n# q1,"));

    let o = synril(&["export", "--run-dir", p(&runs), "--what", "violin"]);
    assert_eq!(code(&o), 0);
    let violin = fs::read_to_string(runs.join("violin.csv")).unwrap();
    assert!(violin.contains("\nseed-1/eval_best,50,"));

    let o = synril(&["export", "--run-dir", p(&runs.join("seed-2")), "--what", "traj-svg"]);
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(runs.join("seed-2/traj.svg")).unwrap().contains("class=\"star\""));

    let x = root.join("x.csv");
    let mismatch = ["eval", "--weights", p(&weights), "--env", "river-lite", "--episodes", "1", "--out", p(&x)];
    assert_eq!(code(&synril(&mismatch)), 2);
}

#[test]
fn export_of_empty_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    for what in ["curves", "violin", "traj-svg"] {
        let o = synril(&["export", "--run-dir", p(dir.path()), "--what", what]);
        assert_eq!(code(&o), 2, "{what}");
        assert!(!o.stderr.is_empty());
    }
}
