//! Run configuration files, metrics and evaluation tables, checkpoints and the
//! file-writing training driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bc::{read_jsonl, BcError, DemoDataset};
use crate::env::{make_env, Env, EnvKind};
use crate::export::{record_traces, traces_to_jsonl};
use crate::neural::{write_flat, MultiCategorical, NeuralError, PolicyNet};
use crate::rng;
use crate::oracle::collect_scripted;
use crate::synergy::{Event, Method, MetricsRow, SynergyConfig, SynergyError, Trainer, TrainerState};

pub const METRICS_VERSION: &str = "# synril-metrics v1";
pub const EVAL_VERSION: &str = "# synril-eval v1";

pub const METRICS_COLUMNS: [&str; 10] = [
    "step",
    "mean_ep_reward_100",
    "mean_ep_len_100",
    "eval_mean",
    "eval_len",
    "w3",
    "dataset_transitions",
    "policy_loss",
    "value_loss",
    "action_loss",
];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Bc(#[from] BcError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Synergy(#[from] SynergyError),
}

impl IoError {
    /// Whether the error stems from user configuration rather than a failure
    /// while running.
    pub fn is_config(&self) -> bool {
        matches!(self, IoError::Config(_) | IoError::Synergy(SynergyError::Config(_) | SynergyError::MissingDemos(_)))
    }
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

pub fn read_to_string(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(file_err(path))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    fs::write(path, bytes).map_err(file_err(path))
}

/// Where a guided run's demonstrations come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DemoSource {
    None,
    File(PathBuf),
    /// Collected in-process from the scripted expert with the run's seed.
    Scripted(usize),
}

/// A run configuration file as written by a user: every training field is
/// optional and filled from the environment's defaults. Unknown keys are
/// rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub env: Option<EnvKind>,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub total_steps: Option<usize>,
    pub t_reward: Option<f64>,
    pub eval_every: Option<usize>,
    pub eval_episodes: Option<usize>,
    pub baseline_episodes: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub w3_initial: Option<f64>,
    pub w3_after: Option<f64>,
    /// Demonstration file, relative to the config file.
    pub demos: Option<PathBuf>,
    /// Number of scripted demonstrations to collect instead of reading a file.
    pub scripted_demos: Option<usize>,
    pub ppo: Option<toml::Table>,
    pub bc: Option<toml::Table>,
    pub river: Option<toml::Table>,
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synergy: SynergyConfig,
    pub demos: DemoSource,
}

/// Applies the keys of `table` over `base`, rejecting keys `T` does not know.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, table: &toml::Table, what: &str) -> Result<T, IoError> {
    let mut merged = toml::Table::try_from(base).map_err(|e| IoError::Config(format!("{what}: {e}")))?;
    for (k, v) in table {
        merged.insert(k.clone(), v.clone());
    }
    merged.try_into().map_err(|e: toml::de::Error| IoError::Config(format!("[{what}] {}", e.message())))
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))
    }

    /// Fills defaults; `base_dir` anchors a relative demo path.
    pub fn resolve(&self, base_dir: &Path) -> Result<RunConfig, IoError> {
        let env = self.env.ok_or_else(|| IoError::Config("missing key 'env'".into()))?;
        let method = self.method.ok_or_else(|| IoError::Config("missing key 'method'".into()))?;
        let mut c = SynergyConfig::for_env(env, method, self.seed.unwrap_or(0));
        if let Some(h) = &self.hidden {
            c.hidden = h.clone();
            c.bc.hidden = h.clone();
        }
        c.total_steps = self.total_steps.unwrap_or(c.total_steps);
        c.t_reward = self.t_reward.unwrap_or(c.t_reward);
        c.eval_every = self.eval_every.unwrap_or(c.eval_every);
        c.eval_episodes = self.eval_episodes.unwrap_or(c.eval_episodes);
        c.baseline_episodes = self.baseline_episodes.unwrap_or(c.baseline_episodes);
        c.w3_initial = self.w3_initial.unwrap_or(c.w3_initial);
        c.w3_after = self.w3_after.unwrap_or(c.w3_after);
        if let Some(t) = &self.ppo {
            c.ppo = overlay(&c.ppo, t, "ppo")?;
        }
        if let Some(t) = &self.bc {
            c.bc = overlay(&c.bc, t, "bc")?;
        }
        if let Some(t) = &self.river {
            let base = c
                .river
                .clone()
                .ok_or_else(|| IoError::Config("[river] given for a non-river environment".into()))?;
            c.river = Some(overlay(&base, t, "river")?);
        }
        c.validate()?;
        let demos = match (&self.demos, self.scripted_demos) {
            (Some(_), Some(_)) => return Err(IoError::Config("give either 'demos' or 'scripted_demos', not both".into())),
            (Some(p), None) => DemoSource::File(if p.is_absolute() { p.clone() } else { base_dir.join(p) }),
            (None, Some(0)) => return Err(IoError::Config("scripted_demos must be positive".into())),
            (None, Some(n)) => DemoSource::Scripted(n),
            (None, None) => DemoSource::None,
        };
        if method.needs_expert() && demos == DemoSource::None {
            return Err(IoError::Config(format!("method {method} needs 'demos' or 'scripted_demos'")));
        }
        Ok(RunConfig { synergy: c, demos })
    }

    pub fn load(path: &Path) -> Result<RunConfig, IoError> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&read_to_string(path)?)?.resolve(base)
    }
}

impl RunConfig {
    /// The fully expanded configuration as TOML; parsing it back resolves to
    /// the same run.
    pub fn to_toml(&self) -> Result<String, IoError> {
        let c = &self.synergy;
        let file = RunConfigFile {
            env: Some(c.env),
            method: Some(c.method),
            seed: Some(c.seed),
            total_steps: Some(c.total_steps),
            t_reward: Some(c.t_reward),
            eval_every: Some(c.eval_every),
            eval_episodes: Some(c.eval_episodes),
            baseline_episodes: Some(c.baseline_episodes),
            hidden: Some(c.hidden.clone()),
            w3_initial: Some(c.w3_initial),
            w3_after: Some(c.w3_after),
            demos: match &self.demos {
                DemoSource::File(p) => Some(p.clone()),
                _ => None,
            },
            scripted_demos: match self.demos {
                DemoSource::Scripted(n) => Some(n),
                _ => None,
            },
            ppo: Some(to_table(&c.ppo)?),
            bc: Some(to_table(&c.bc)?),
            river: c.river.as_ref().map(to_table).transpose()?,
        };
        toml::to_string(&file).map_err(|e| IoError::Config(e.to_string()))
    }

    /// Loads or collects the demonstrations this run needs.
    pub fn demonstrations(&self) -> Result<Option<DemoDataset>, IoError> {
        let c = &self.synergy;
        let env = make_env(c.env, c.river.as_ref());
        let spec = env.spec();
        let trajs = match &self.demos {
            DemoSource::None => return Ok(None),
            DemoSource::File(p) => read_jsonl(p, Some(spec)).map_err(|e| match e {
                BcError::Io(source) => IoError::File { path: p.clone(), source },
                other => IoError::Format { path: p.clone(), msg: other.to_string() },
            })?,
            DemoSource::Scripted(n) => collect_scripted(c.env, *n, c.seed, None, c.river.as_ref()).0,
        };
        let mut ds = DemoDataset::new(spec.observation_dim, spec.action_branch_cardinalities.len(), false);
        for t in &trajs {
            ds.append(t)?;
        }
        Ok(Some(ds))
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table, IoError> {
    toml::Table::try_from(v).map_err(|e| IoError::Config(e.to_string()))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Metrics table with a version line before the header.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_VERSION}\n{}\n", METRICS_COLUMNS.join(","));
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            opt(r.mean_ep_reward_100),
            opt(r.mean_ep_len_100),
            opt(r.eval_mean),
            opt(r.eval_len),
            r.w3,
            r.dataset_transitions,
            opt(r.policy_loss),
            opt(r.value_loss),
            opt(r.action_loss),
        ));
    }
    s
}

fn check_version(path: &Path, text: &str, want: &str) -> Result<(), IoError> {
    let first = text.lines().next().unwrap_or("");
    if first != want {
        return Err(IoError::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported schema line '{first}', expected '{want}'"),
        });
    }
    Ok(())
}

fn parse_opt(path: &Path, s: &str) -> Result<Option<f64>, IoError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| IoError::Format { path: path.to_path_buf(), msg: format!("bad number '{s}'") })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, IoError> {
    let text = read_to_string(path)?;
    check_version(path, &text, METRICS_VERSION)?;
    let fmt = |msg: String| IoError::Format { path: path.to_path_buf(), msg };
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().map_err(|e| fmt(e.to_string()))?.iter().map(String::from).collect();
    if header != METRICS_COLUMNS {
        return Err(fmt(format!("unexpected columns {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let int = |i: usize| rec[i].parse::<usize>().map_err(|_| fmt(format!("bad integer '{}'", &rec[i])));
        rows.push(MetricsRow {
            step: int(0)?,
            mean_ep_reward_100: parse_opt(path, &rec[1])?,
            mean_ep_len_100: parse_opt(path, &rec[2])?,
            eval_mean: parse_opt(path, &rec[3])?,
            eval_len: parse_opt(path, &rec[4])?,
            w3: parse_opt(path, &rec[5])?.ok_or_else(|| fmt("missing w3".into()))?,
            dataset_transitions: int(6)?,
            policy_loss: parse_opt(path, &rec[7])?,
            value_loss: parse_opt(path, &rec[8])?,
            action_loss: parse_opt(path, &rec[9])?,
        });
    }
    Ok(rows)
}

/// Mean, median, quartiles and spread of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Summary> {
        if xs.is_empty() {
            return None;
        }
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Some(Summary {
            n,
            mean,
            std: var.sqrt(),
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[n - 1],
        })
    }
}

/// Per-episode evaluation table followed by summary comment lines.
pub fn eval_csv(rewards: &[f64], lengths: &[usize]) -> String {
    let mut s = format!("{EVAL_VERSION}\nepisode,reward,length\n");
    for (i, (r, l)) in rewards.iter().zip(lengths).enumerate() {
        s.push_str(&format!("{i},{r},{l}\n"));
    }
    let ls: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    if let (Some(r), Some(l)) = (Summary::of(rewards), Summary::of(&ls)) {
        for (name, a, b) in [
            ("mean", r.mean, l.mean),
            ("std", r.std, l.std),
            ("min", r.min, l.min),
            ("q1", r.q1, l.q1),
            ("median", r.median, l.median),
            ("q3", r.q3, l.q3),
            ("max", r.max, l.max),
        ] {
            s.push_str(&format!("# {name},{a},{b}\n"));
        }
    }
    s
}

pub fn read_eval(path: &Path) -> Result<(Vec<f64>, Vec<usize>), IoError> {
    let text = read_to_string(path)?;
    check_version(path, &text, EVAL_VERSION)?;
    let fmt = |msg: String| IoError::Format { path: path.to_path_buf(), msg };
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let (mut rewards, mut lengths) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        if rec.len() != 3 {
            return Err(fmt("expected 3 columns".into()));
        }
        rewards.push(rec[1].parse().map_err(|_| fmt(format!("bad reward '{}'", &rec[1])))?);
        lengths.push(rec[2].parse().map_err(|_| fmt(format!("bad length '{}'", &rec[2])))?);
    }
    Ok((rewards, lengths))
}

/// Final numbers of a run, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env: EnvKind,
    pub method: Method,
    pub seed: u64,
    pub steps: usize,
    pub final_mean_reward_100: Option<f64>,
    pub final_mean_len_100: Option<f64>,
    pub best_eval_mean: Option<f64>,
    pub best_step: Option<usize>,
    pub final_eval_mean: Option<f64>,
    pub final_eval_rewards: Vec<f64>,
    pub bc_initial_eval_mean: Option<f64>,
    pub bc_train_accuracy: Option<f64>,
    pub w3_latched_at: Option<usize>,
    pub dataset_transitions: usize,
}

impl RunSummary {
    pub fn of(trainer: &Trainer) -> Self {
        let s = &trainer.state;
        let c = &trainer.config;
        let last = s.metrics.last();
        let final_eval = s.evals.iter().rev().find(|e| e.is_final);
        RunSummary {
            env: c.env,
            method: c.method,
            seed: c.seed,
            steps: s.step,
            final_mean_reward_100: last.and_then(|r| r.mean_ep_reward_100),
            final_mean_len_100: last.and_then(|r| r.mean_ep_len_100),
            best_eval_mean: s.best.as_ref().map(|b| b.eval_mean),
            best_step: s.best.as_ref().map(|b| b.step),
            final_eval_mean: final_eval.map(|e| e.mean_reward),
            final_eval_rewards: final_eval.map(|e| e.rewards.clone()).unwrap_or_default(),
            bc_initial_eval_mean: s.bc_initial,
            bc_train_accuracy: s.bc_train_accuracy,
            w3_latched_at: s
                .evals
                .iter()
                .find(|e| s.w3.latched && e.w3 == s.w3.after)
                .map(|e| e.step),
            dataset_transitions: s.dataset.as_ref().map_or(0, DemoDataset::len),
        }
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.0.join("config.toml")
    }
    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.csv")
    }
    pub fn evals(&self) -> PathBuf {
        self.0.join("evals.jsonl")
    }
    pub fn summary(&self) -> PathBuf {
        self.0.join("summary.json")
    }
    pub fn best_policy(&self) -> PathBuf {
        self.0.join("best_policy.snnw")
    }
    pub fn final_policy(&self) -> PathBuf {
        self.0.join("final_policy.snnw")
    }
    pub fn traces(&self) -> PathBuf {
        self.0.join("traces.jsonl")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.0.join("checkpoint")
    }
    pub fn state(&self) -> PathBuf {
        self.checkpoint().join("state.json")
    }
}

fn save_weights(path: &Path, dims: &[usize], payload: &[f32]) -> Result<(), IoError> {
    let mut buf = Vec::new();
    write_flat(&mut buf, dims, payload)?;
    write_file(path, buf)
}

/// Writes the resumable state plus human-usable copies of every network, the
/// optimizer moments and the dataset.
pub fn save_checkpoint(dir: &RunDir, trainer: &Trainer) -> Result<(), IoError> {
    let ck = dir.checkpoint();
    let s = &trainer.state;
    if let Some(l) = &s.learner {
        save_weights(&ck.join("policy.snnw"), l.policy.mlp.dims(), l.policy.mlp.params())?;
        save_weights(&ck.join("value.snnw"), l.value.dims(), l.value.params())?;
        save_weights(&ck.join("policy_adam_m.snnw"), l.policy.mlp.dims(), &l.policy_opt.m)?;
        save_weights(&ck.join("policy_adam_v.snnw"), l.policy.mlp.dims(), &l.policy_opt.v)?;
        save_weights(&ck.join("value_adam_m.snnw"), l.value.dims(), &l.value_opt.m)?;
        save_weights(&ck.join("value_adam_v.snnw"), l.value.dims(), &l.value_opt.v)?;
    }
    if let Some(e) = &s.expert {
        save_weights(&ck.join("expert.snnw"), e.policy.mlp.dims(), e.policy.mlp.params())?;
    }
    if let Some(d) = &s.dataset {
        fs::create_dir_all(&ck).map_err(file_err(&ck))?;
        d.save_jsonl(&ck.join("dataset.jsonl"))?;
    }
    let json = serde_json::to_vec(s).map_err(|e| IoError::Config(format!("state serialization: {e}")))?;
    let tmp = ck.join("state.json.tmp");
    write_file(&tmp, json)?;
    fs::rename(&tmp, dir.state()).map_err(file_err(&dir.state()))
}

pub fn load_state(dir: &RunDir) -> Result<TrainerState, IoError> {
    let path = dir.state();
    let text = read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| IoError::Format { path, msg: e.to_string() })
}

fn write_outputs(dir: &RunDir, trainer: &Trainer) -> Result<(), IoError> {
    let s = &trainer.state;
    write_file(&dir.metrics(), metrics_csv(&s.metrics))?;
    let mut evals = Vec::new();
    for e in &s.evals {
        serde_json::to_writer(&mut evals, e).map_err(|e| IoError::Config(e.to_string()))?;
        evals.push(b'\n');
    }
    write_file(&dir.evals(), evals)
}

/// Episodes of the best policy traced at the end of a run.
pub const TRACE_EPISODES: usize = 3;

/// Trains with outputs under `out_dir`: resolved `config.toml`, `metrics.csv`,
/// `evals.jsonl`, a checkpoint after every evaluation, and on completion
/// `best_policy.snnw`, `final_policy.snnw`, `traces.jsonl` and `summary.json`. With `resume`
/// an existing checkpoint is continued.
pub fn run_training(
    config: &RunConfig,
    out_dir: &Path,
    resume: bool,
    mut progress: impl FnMut(&Trainer, Event<'_>),
) -> Result<RunSummary, IoError> {
    let dir = RunDir(out_dir.to_path_buf());
    fs::create_dir_all(out_dir).map_err(file_err(out_dir))?;
    let stamped = config.to_toml()?;
    if resume && dir.state().exists() {
        let existing = read_to_string(&dir.config())?;
        if existing != stamped {
            return Err(IoError::Config(format!("{} differs from the configuration being resumed", dir.config().display())));
        }
    }
    write_file(&dir.config(), &stamped)?;
    let mut trainer = if resume && dir.state().exists() {
        Trainer::from_state(config.synergy.clone(), load_state(&dir)?)?
    } else {
        Trainer::new(config.synergy.clone(), config.demonstrations()?)?
    };
    trainer.run(|t, ev| {
        progress(t, ev);
        if let Event::Eval(_) = ev {
            save_checkpoint(&dir, t).and_then(|_| write_outputs(&dir, t)).map_err(|e| SynergyError::Sink(e.to_string()))?;
        }
        Ok(())
    })?;
    write_outputs(&dir, &trainer)?;
    let policy = &trainer.acting_policy().mlp;
    save_weights(&dir.final_policy(), policy.dims(), policy.params())?;
    if let Some(b) = &trainer.state.best {
        save_weights(&dir.best_policy(), b.policy.dims(), b.policy.params())?;
        let c = &trainer.config;
        let spec = make_env(c.env, c.river.as_ref()).spec().clone();
        let net = PolicyNet { mlp: b.policy.clone(), head: MultiCategorical::new(&spec.action_branch_cardinalities) };
        let seed = rng::derive_seed(c.seed, "trace");
        let lines = record_traces(&net, c.env, c.river.as_ref(), TRACE_EPISODES, seed)?;
        write_file(&dir.traces(), traces_to_jsonl(&lines))?;
    }
    save_checkpoint(&dir, &trainer)?;
    let summary = RunSummary::of(&trainer);
    let mut json = serde_json::to_vec_pretty(&summary).map_err(|e| IoError::Config(e.to_string()))?;
    json.push(b'\n');
    write_file(&dir.summary(), json)?;
    Ok(summary)
}

/// Appends one line to a text file.
pub fn append_line(path: &Path, line: &str) -> Result<(), IoError> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(file_err(path))?;
    writeln!(f, "{line}").map_err(file_err(path))
}
