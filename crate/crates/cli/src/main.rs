use std::fs;
use std::io::{self, IsTerminal};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Parser, Subcommand, ValueEnum};
use synril_core::bc::write_jsonl;
use synril_core::env::{make_env, Env, EnvKind};
use synril_core::export::{record_traces, traces_from_jsonl, traj_svg, traces_to_jsonl, violin_csv, CurveTable};
use synril_core::io::{eval_csv, read_eval, read_metrics, run_training, write_file, IoError, RunConfigFile};
use synril_core::oracle::{collect_scripted, keyboard_play, DemoMetadata};
use synril_core::river::RiverConfig;
use synril_core::synergy::{evaluate, Event, MetricsRow};
use synril_core::{Mlp, MultiCategorical, PolicyNet};

/// Synergistic reinforcement and imitation learning on CliffCircular and
/// river-lite.
///
/// Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
#[derive(Parser)]
#[command(name = "synril", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Record demonstrations as JSONL plus a `<out>.meta.json` sidecar.
    Collect {
        /// cliff-circular or river-lite.
        #[arg(long)]
        env: EnvKind,
        #[arg(long, value_enum, default_value = "scripted")]
        source: Source,
        /// Episodes to record (scripted) or play (keyboard).
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fixed noise rate for the scripted expert; calibrated when omitted
        /// on CliffCircular.
        #[arg(long)]
        epsilon: Option<f64>,
        /// River map (TOML); the built-in map when omitted.
        #[arg(long)]
        river_config: Option<PathBuf>,
    },
    /// Train one run, or one child process per seed with --seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config's seed.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seeds; each run goes to `<out-dir>/seed-<s>`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate saved policy weights; writes per-episode rewards and lengths.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        env: EnvKind,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a JSONL trace of the same episodes.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        river_config: Option<PathBuf>,
    },
    /// Turn run outputs into figure data.
    Export {
        /// A run directory, or a directory of run directories.
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        /// Metrics column for curves.
        #[arg(long, default_value = "mean_ep_reward_100")]
        column: String,
        /// Output file; defaults to a file inside the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Scripted,
    Keyboard,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    /// Per-seed and mean/stderr learning curves.
    Curves,
    /// Distribution statistics of every evaluation CSV.
    Violin,
    /// Overhead SVG of traced trajectories.
    TrajSvg,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn config(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Collect { env, source, n, seed, out, epsilon, river_config } => {
            collect(env, source, n, seed, &out, epsilon, river_config.as_deref())
        }
        Cmd::Train { config, out_dir, seed, seeds, resume, quiet } => {
            if seeds.is_empty() {
                train(&config, &out_dir, seed, resume, quiet)
            } else {
                fan_out(&config, &out_dir, &seeds, resume, quiet)
            }
        }
        Cmd::Eval { weights, env, episodes, seed, out, trace, river_config } => {
            eval(&weights, env, episodes, seed, &out, trace.as_deref(), river_config.as_deref())
        }
        Cmd::Export { run_dir, what, column, out } => export(&run_dir, what, &column, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn river_map(env: EnvKind, path: Option<&Path>) -> Result<Option<RiverConfig>, Failure> {
    match (env, path) {
        (EnvKind::RiverLite, Some(p)) => {
            let text = fs::read_to_string(p).map_err(|e| config(format!("{}: {e}", p.display())))?;
            RiverConfig::from_toml(&text).map(Some).map_err(|e| config(format!("{}: {e}", p.display())))
        }
        (EnvKind::RiverLite, None) => Ok(Some(RiverConfig::default())),
        (EnvKind::CliffCircular, Some(_)) => Err(config("--river-config only applies to river-lite")),
        (EnvKind::CliffCircular, None) => Ok(None),
    }
}

fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn collect(
    env: EnvKind,
    source: Source,
    n: usize,
    seed: u64,
    out: &Path,
    epsilon: Option<f64>,
    river_path: Option<&Path>,
) -> Result<(), Failure> {
    if n == 0 {
        return Err(config("--n must be positive"));
    }
    let river = river_map(env, river_path)?;
    let (trajs, meta) = match source {
        Source::Scripted => collect_scripted(env, n, seed, epsilon, river.as_ref()),
        Source::Keyboard => {
            if !io::stdin().is_terminal() {
                return Err(config("keyboard collection needs an interactive terminal on stdin"));
            }
            let trajs = keyboard_play(env, river.as_ref(), n, seed, &mut io::stdin().lock(), &mut io::stdout())
                .map_err(runtime)?;
            let transitions = trajs.iter().map(|t| t.len()).sum();
            let mean_reward = trajs.iter().map(|t| t.episodic_reward()).sum::<f64>() / trajs.len().max(1) as f64;
            let meta = DemoMetadata {
                env,
                source: "keyboard".into(),
                seed,
                trajectories: trajs.len(),
                transitions,
                mean_reward,
                epsilon: 0.0,
                calibration: None,
            };
            (trajs, meta)
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    write_jsonl(out, trajs).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let mut json = serde_json::to_vec_pretty(&meta).map_err(runtime)?;
    json.push(b'\n');
    write_file(&meta_path(out), json)?;
    eprintln!(
        "wrote {} trajectories ({} transitions, mean reward {:.2}) to {}",
        meta.trajectories,
        meta.transitions,
        meta.mean_reward,
        out.display()
    );
    Ok(())
}

fn train(config_path: &Path, out_dir: &Path, seed: Option<u64>, resume: bool, quiet: bool) -> Result<(), Failure> {
    let mut cfg = RunConfigFile::load(config_path).map_err(config)?;
    if let Some(s) = seed {
        cfg.synergy.seed = s;
    }
    let summary = run_training(&cfg, out_dir, resume, |t, ev| {
        if quiet {
            return;
        }
        match ev {
            Event::Eval(e) => eprintln!(
                "[{} seed {}] eval step {:>7}: mean {:7.2} len {:6.1} w3 {:.2} harvested {}",
                t.config.method, t.config.seed, e.step, e.mean_reward, e.mean_length, e.w3, e.harvested
            ),
            Event::Row(r) => {
                if let (Some(m), Some(l)) = (r.mean_ep_reward_100, r.mean_ep_len_100) {
                    eprintln!(
                        "[{} seed {}] step {:>7}: mean_ep_reward_100 {m:7.2} len {l:6.1}",
                        t.config.method, t.config.seed, r.step
                    );
                }
            }
        }
    })?;
    println!("{}", serde_json::to_string(&summary).map_err(runtime)?);
    Ok(())
}

fn fan_out(config_path: &Path, out_dir: &Path, seeds: &[u64], resume: bool, quiet: bool) -> Result<(), Failure> {
    RunConfigFile::load(config_path).map_err(config)?;
    let exe = std::env::current_exe().map_err(runtime)?;
    let mut children = Vec::new();
    for &s in seeds {
        let mut cmd = Command::new(&exe);
        cmd.arg("train").arg("--config").arg(config_path);
        cmd.arg("--out-dir").arg(out_dir.join(format!("seed-{s}"))).arg("--seed").arg(s.to_string());
        if resume {
            cmd.arg("--resume");
        }
        if quiet {
            cmd.arg("--quiet");
        }
        children.push((s, cmd.spawn().map_err(runtime)?));
    }
    let mut failed = Vec::new();
    for (s, mut child) in children {
        let status = child.wait().map_err(runtime)?;
        if !status.success() {
            failed.push(s);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!("runs failed for seeds {failed:?}")))
    }
}

fn load_policy(weights: &Path, env: EnvKind, river: Option<&RiverConfig>) -> Result<PolicyNet<f32>, Failure> {
    let mlp = Mlp::<f32>::load(weights).map_err(|e| config(format!("{}: {e}", weights.display())))?;
    let spec = make_env(env, river).spec().clone();
    let head = MultiCategorical::new(&spec.action_branch_cardinalities);
    let dims = mlp.dims();
    if dims[0] != spec.observation_dim || dims[dims.len() - 1] != head.n_logits() {
        return Err(config(format!(
            "{}: network maps {} inputs to {} logits but {env} needs {} to {}",
            weights.display(),
            dims[0],
            dims[dims.len() - 1],
            spec.observation_dim,
            head.n_logits()
        )));
    }
    Ok(PolicyNet { mlp, head })
}

fn eval(
    weights: &Path,
    env: EnvKind,
    episodes: usize,
    seed: u64,
    out: &Path,
    trace: Option<&Path>,
    river_path: Option<&Path>,
) -> Result<(), Failure> {
    if episodes == 0 {
        return Err(config("--episodes must be positive"));
    }
    let river = river_map(env, river_path)?;
    let policy = load_policy(weights, env, river.as_ref())?;
    let r = evaluate(&policy, env, river.as_ref(), episodes, seed).map_err(runtime)?;
    write_file(out, eval_csv(&r.rewards, &r.lengths))?;
    if let Some(t) = trace {
        let lines = record_traces(&policy, env, river.as_ref(), episodes, seed).map_err(runtime)?;
        write_file(t, traces_to_jsonl(&lines))?;
    }
    eprintln!("{episodes} episodes: mean reward {:.3}, mean length {:.1}", r.mean_reward(), r.mean_length());
    Ok(())
}

/// Run directories at or directly below `root`, labelled by directory name.
fn runs_with(root: &Path, file: &str) -> Result<Vec<(String, PathBuf)>, Failure> {
    if !root.is_dir() {
        return Err(config(format!("{} is not a directory", root.display())));
    }
    if root.join(file).is_file() {
        let label = root.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned());
        return Ok(vec![(label, root.join(file))]);
    }
    let mut runs = Vec::new();
    for entry in fs::read_dir(root).map_err(runtime)? {
        let p = entry.map_err(runtime)?.path();
        if p.join(file).is_file() {
            runs.push((p.file_name().expect("directory entry").to_string_lossy().into_owned(), p.join(file)));
        }
    }
    runs.sort();
    if runs.is_empty() {
        return Err(config(format!("no {file} in {} or its subdirectories", root.display())));
    }
    Ok(runs)
}

fn metric_column(name: &str) -> Result<fn(&MetricsRow) -> Option<f64>, Failure> {
    Ok(match name {
        "mean_ep_reward_100" => |r| r.mean_ep_reward_100,
        "mean_ep_len_100" => |r| r.mean_ep_len_100,
        "eval_mean" => |r| r.eval_mean,
        "eval_len" => |r| r.eval_len,
        "w3" => |r| Some(r.w3),
        "dataset_transitions" => |r| Some(r.dataset_transitions as f64),
        "policy_loss" => |r| r.policy_loss,
        "value_loss" => |r| r.value_loss,
        "action_loss" => |r| r.action_loss,
        other => return Err(config(format!("unknown metrics column '{other}'"))),
    })
}

fn csv_files(root: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))? {
            let p = entry.map_err(runtime)?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                let head = fs::read_to_string(&p).map_err(runtime)?;
                if head.starts_with(synril_core::io::EVAL_VERSION) {
                    let rel = p.strip_prefix(root).unwrap_or(&p).with_extension("");
                    found.push((rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "/"), p));
                }
            }
        }
    }
    found.sort();
    Ok(found)
}

fn export(root: &Path, what: What, column: &str, out: Option<PathBuf>) -> Result<(), Failure> {
    if !root.is_dir() {
        return Err(config(format!("{} is not a directory", root.display())));
    }
    let out = match what {
        What::Curves => {
            let col = metric_column(column)?;
            let mut runs = Vec::new();
            for (label, path) in runs_with(root, "metrics.csv")? {
                runs.push((label, read_metrics(&path)?));
            }
            let target = out.unwrap_or_else(|| root.join(format!("curves_{column}.csv")));
            write_file(&target, CurveTable::build(&runs, col).to_csv())?;
            target
        }
        What::Violin => {
            let files = csv_files(root)?;
            if files.is_empty() {
                return Err(config(format!("no evaluation CSVs under {}", root.display())));
            }
            let mut groups = Vec::new();
            for (label, path) in files {
                groups.push((label, read_eval(&path)?.0));
            }
            let target = out.unwrap_or_else(|| root.join("violin.csv"));
            write_file(&target, violin_csv(&groups))?;
            target
        }
        What::TrajSvg => {
            let runs = runs_with(root, "traces.jsonl")?;
            if runs.len() > 1 && out.is_some() {
                return Err(config("--out needs a single run directory for traj-svg"));
            }
            for (_, path) in &runs {
                let text = fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
                let lines = traces_from_jsonl(&text).map_err(|e| config(format!("{}: {e}", path.display())))?;
                let svg = traj_svg(&lines).map_err(|e| config(format!("{}: {e}", path.display())))?;
                let target = out.clone().unwrap_or_else(|| path.with_file_name("traj.svg"));
                write_file(&target, svg)?;
                eprintln!("wrote {}", target.display());
            }
            return Ok(());
        }
    };
    eprintln!("wrote {}", out.display());
    Ok(())
}
