use std::fs;

use synril_core::env::EnvKind;
use synril_core::io::{
    eval_csv, load_state, metrics_csv, read_eval, read_metrics, run_training, DemoSource, RunConfigFile, RunDir,
};
use synril_core::synergy::{Method, Trainer};

const SMALL: &str = r#"
env = "cliff-circular"
method = "ppo_dynamic_bc"
seed = 3
total_steps = 3072
eval_every = 1024
hidden = [16, 16]
scripted_demos = 5
t_reward = 0.0

[ppo]
epochs = 2

[bc]
pretrain_epochs = 2
retrain_epochs = 1
"#;

#[test]
fn config_fills_defaults_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfigFile::parse(SMALL).unwrap().resolve(dir.path()).unwrap();
    assert_eq!(c.synergy.env, EnvKind::CliffCircular);
    assert_eq!(c.synergy.ppo.epochs, 2);
    assert_eq!(c.synergy.ppo.clip, 0.2);
    assert_eq!(c.synergy.bc.window, 2000);
    assert_eq!(c.synergy.bc.hidden, vec![16, 16]);
    assert_eq!(c.demos, DemoSource::Scripted(5));
    let text = c.to_toml().unwrap();
    let back = RunConfigFile::parse(&text).unwrap().resolve(dir.path()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let top = format!("{SMALL}\n[extra]\nx = 1\n");
    assert!(RunConfigFile::parse(&top).is_err());
    let typo = SMALL.replace("total_steps", "total_step");
    assert!(RunConfigFile::parse(&typo).is_err());
    let nested = SMALL.replace("epochs = 2", "epochz = 2");
    let e = RunConfigFile::parse(&nested).unwrap().resolve(dir.path()).unwrap_err();
    assert!(e.is_config(), "{e}");
    let river = format!("{SMALL}\n[river]\nn_segments = 10\n");
    assert!(RunConfigFile::parse(&river).unwrap().resolve(dir.path()).unwrap_err().is_config());
}

#[test]
fn guided_method_without_demos_is_a_config_error() {
    let text = SMALL.replace("scripted_demos = 5", "");
    let e = RunConfigFile::parse(&text).unwrap().resolve(std::path::Path::new(".")).unwrap_err();
    assert!(e.is_config());
    let both = SMALL.replace("scripted_demos = 5", "scripted_demos = 5\ndemos = \"d.jsonl\"");
    assert!(RunConfigFile::parse(&both).unwrap().resolve(std::path::Path::new(".")).is_err());
}

#[test]
fn relative_demo_path_is_anchored_at_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("scripted_demos = 5", "demos = \"demos/d.jsonl\"");
    let path = dir.path().join("run.toml");
    fs::write(&path, text).unwrap();
    let c = RunConfigFile::load(&path).unwrap();
    assert_eq!(c.demos, DemoSource::File(dir.path().join("demos/d.jsonl")));
    assert!(c.demonstrations().is_err());
}

#[test]
fn metrics_and_eval_tables_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfigFile::parse(SMALL).unwrap().resolve(dir.path()).unwrap();
    let mut t = Trainer::new(c.synergy.clone(), c.demonstrations().unwrap()).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, metrics_csv(&t.state.metrics)).unwrap();
    assert_eq!(read_metrics(&path).unwrap(), t.state.metrics);

    let text = fs::read_to_string(&path).unwrap().replace("v1", "v9");
    fs::write(&path, text).unwrap();
    assert!(read_metrics(&path).unwrap_err().to_string().contains("schema"));

    let ep = dir.path().join("e.csv");
    let csv = eval_csv(&[1.0, -2.5, 20.0], &[10, 5, 30]);
    assert!(csv.contains("# median,1,10\n"));
    fs::write(&ep, &csv).unwrap();
    assert_eq!(read_eval(&ep).unwrap(), (vec![1.0, -2.5, 20.0], vec![10, 5, 30]));
}

#[test]
fn training_is_deterministic_and_resumable() {
    let root = tempfile::tempdir().unwrap();
    let c = RunConfigFile::parse(SMALL).unwrap().resolve(root.path()).unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let sa = run_training(&c, &a, false, |_, _| {}).unwrap();
    let sb = run_training(&c, &b, false, |_, _| {}).unwrap();
    assert_eq!(sa, sb);
    for f in ["metrics.csv", "evals.jsonl", "config.toml", "best_policy.snnw", "final_policy.snnw", "traces.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(read_metrics(&a.join("metrics.csv")).unwrap().len(), 3);

    // Resume from the checkpoint written at the first evaluation.
    let state = load_state(&RunDir(a.clone())).unwrap();
    assert!(state.finished);
    let mut t = Trainer::new(c.synergy.clone(), c.demonstrations().unwrap()).unwrap();
    t.run_until(1, |_, _| Ok(())).unwrap();
    let ck = root.path().join("c");
    synril_core::io::save_checkpoint(&RunDir(ck.clone()), &t).unwrap();
    fs::write(ck.join("config.toml"), c.to_toml().unwrap()).unwrap();
    let sc = run_training(&c, &ck, true, |_, _| {}).unwrap();
    assert_eq!(sc, sa);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(ck.join("metrics.csv")).unwrap());

    // A different configuration refuses to resume.
    let mut other = c.clone();
    other.synergy.seed = 4;
    assert!(run_training(&other, &ck, true, |_, _| {}).unwrap_err().is_config());
}

#[test]
fn summary_reports_method() {
    let root = tempfile::tempdir().unwrap();
    let text = SMALL.replace("ppo_dynamic_bc", "ppo").replace("scripted_demos = 5", "");
    let c = RunConfigFile::parse(&text).unwrap().resolve(root.path()).unwrap();
    let s = run_training(&c, root.path(), false, |_, _| {}).unwrap();
    assert_eq!(s.method, Method::Ppo);
    assert_eq!(s.steps, 3072);
    assert!(s.bc_initial_eval_mean.is_none());
    assert_eq!(s.final_eval_rewards.len(), 10);
    assert!(root.path().join("summary.json").exists());
}
