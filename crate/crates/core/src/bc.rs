//! Demonstration dataset and behavior cloning.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, EnvSpec};
use crate::neural::{Adam, AdamConfig, NeuralError, PolicyNet};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum BcError {
    #[error("no training data")]
    Empty,
    #[error("malformed trajectory: {0}")]
    Malformed(String),
    #[error("demo file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// One episode of observation/action/reward triples. Serialized as
/// `{"obs": [[...]], "acts": [[...]], "rews": [...]}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub obs: Vec<Vec<f32>>,
    pub acts: Vec<Vec<usize>>,
    pub rews: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rews.is_empty()
    }

    pub fn push(&mut self, obs: &[f32], action: &Action, reward: f64) {
        self.obs.push(obs.to_vec());
        self.acts.push(action.0.clone());
        self.rews.push(reward);
    }

    pub fn episodic_reward(&self) -> f64 {
        self.rews.iter().sum()
    }

    /// Checks alignment, finiteness and, given a spec, shapes and action ranges.
    pub fn validate(&self, spec: Option<&EnvSpec>) -> Result<(), BcError> {
        let n = self.rews.len();
        if self.obs.len() != n || self.acts.len() != n {
            return Err(BcError::Malformed(format!(
                "{} observations, {} actions, {} rewards",
                self.obs.len(),
                self.acts.len(),
                n
            )));
        }
        if self.rews.iter().any(|r| !r.is_finite()) || self.obs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(BcError::Malformed("non-finite value".into()));
        }
        let obs_dim = spec.map(|s| s.observation_dim).or(self.obs.first().map(Vec::len));
        if let Some(d) = obs_dim {
            if self.obs.iter().any(|o| o.len() != d) {
                return Err(BcError::Malformed(format!("observation length differs from {d}")));
            }
        }
        if let Some(spec) = spec {
            for a in &self.acts {
                Action(a.clone())
                    .validate(&spec.action_branch_cardinalities)
                    .map_err(|e| BcError::Malformed(e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// Ordered store of demonstration transitions grouped by trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoDataset {
    obs_dim: usize,
    n_branches: usize,
    dedup: bool,
    obs: Vec<f32>,
    acts: Vec<usize>,
    rews: Vec<f64>,
    /// Start index of each trajectory in the flat arrays.
    starts: Vec<usize>,
    #[serde(skip)]
    seen: HashSet<(Vec<u32>, Vec<usize>)>,
}

impl DemoDataset {
    /// With `dedup` set, every append drops transitions whose exact
    /// (observation, action) pair is already stored.
    pub fn new(obs_dim: usize, n_branches: usize, dedup: bool) -> Self {
        DemoDataset {
            obs_dim,
            n_branches,
            dedup,
            obs: Vec::new(),
            acts: Vec::new(),
            rews: Vec::new(),
            starts: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn n_branches(&self) -> usize {
        self.n_branches
    }

    pub fn dedups(&self) -> bool {
        self.dedup
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.rews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rews.is_empty()
    }

    pub fn n_trajectories(&self) -> usize {
        self.starts.len()
    }

    fn key(&self, i: usize) -> (Vec<u32>, Vec<usize>) {
        (
            self.obs_row(i).iter().map(|v| v.to_bits()).collect(),
            self.action_row(i).to_vec(),
        )
    }

    pub fn obs_row(&self, i: usize) -> &[f32] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action_row(&self, i: usize) -> &[usize] {
        &self.acts[i * self.n_branches..(i + 1) * self.n_branches]
    }

    pub fn trajectory(&self, k: usize) -> Trajectory {
        let end = self.starts.get(k + 1).copied().unwrap_or(self.len());
        let mut t = Trajectory::default();
        for i in self.starts[k]..end {
            t.obs.push(self.obs_row(i).to_vec());
            t.acts.push(self.action_row(i).to_vec());
            t.rews.push(self.rews[i]);
        }
        t
    }

    pub fn trajectories(&self) -> impl Iterator<Item = Trajectory> + '_ {
        (0..self.n_trajectories()).map(|k| self.trajectory(k))
    }

    /// Appends in order and returns how many transitions were kept. A
    /// trajectory left empty by dedup is not recorded.
    pub fn append(&mut self, traj: &Trajectory) -> Result<usize, BcError> {
        traj.validate(None)?;
        if traj.obs.iter().any(|o| o.len() != self.obs_dim) || traj.acts.iter().any(|a| a.len() != self.n_branches) {
            return Err(BcError::Malformed(format!(
                "expected observation length {} and {} action branches",
                self.obs_dim, self.n_branches
            )));
        }
        let start = self.len();
        for i in 0..traj.len() {
            if self.dedup {
                let key = (traj.obs[i].iter().map(|v| v.to_bits()).collect(), traj.acts[i].clone());
                if !self.seen.insert(key) {
                    continue;
                }
            }
            self.obs.extend_from_slice(&traj.obs[i]);
            self.acts.extend_from_slice(&traj.acts[i]);
            self.rews.push(traj.rews[i]);
        }
        let kept = self.len() - start;
        if kept > 0 {
            self.starts.push(start);
        }
        Ok(kept)
    }

    /// Removes later copies of any (observation, action) pair, keeping the
    /// first occurrence. Returns the number removed.
    pub fn dedup(&mut self) -> usize {
        let old = std::mem::replace(self, DemoDataset::new(self.obs_dim, self.n_branches, true));
        let keep_flag = old.dedup;
        for t in old.trajectories() {
            self.append(&t).expect("stored trajectories are well formed");
        }
        self.dedup = keep_flag;
        old.len() - self.len()
    }

    /// Turns duplicate dropping on or off for later appends. Transitions already
    /// stored are kept and count as seen.
    pub fn set_dedup(&mut self, on: bool) {
        self.dedup = on;
        self.reindex();
    }

    /// Rebuilds the duplicate index after deserialization.
    pub fn reindex(&mut self) {
        self.seen = if self.dedup { (0..self.len()).map(|i| self.key(i)).collect() } else { HashSet::new() };
    }

    /// The last `min(k, len)` transitions as (observations, actions) in
    /// insertion order.
    pub fn latest_window(&self, k: usize) -> (&[f32], &[usize]) {
        let from = self.len().saturating_sub(k);
        (&self.obs[from * self.obs_dim..], &self.acts[from * self.n_branches..])
    }

    pub fn all(&self) -> (&[f32], &[usize]) {
        (&self.obs, &self.acts)
    }

    pub fn load_jsonl(path: &Path, spec: &EnvSpec, dedup: bool) -> Result<Self, BcError> {
        let mut ds = DemoDataset::new(spec.observation_dim, spec.action_branch_cardinalities.len(), dedup);
        for t in read_jsonl(path, Some(spec))? {
            ds.append(&t)?;
        }
        Ok(ds)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), BcError> {
        write_jsonl(path, self.trajectories())
    }
}

/// Reads one trajectory per non-blank line.
pub fn read_jsonl(path: &Path, spec: Option<&EnvSpec>) -> Result<Vec<Trajectory>, BcError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory =
            serde_json::from_str(&line).map_err(|e| BcError::Parse { line: i + 1, msg: e.to_string() })?;
        t.validate(spec).map_err(|e| BcError::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, trajs: impl IntoIterator<Item = Trajectory>) -> Result<(), BcError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trajs {
        serde_json::to_writer(&mut w, &t).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub minibatch: usize,
    pub pretrain_epochs: usize,
    pub retrain_epochs: usize,
    pub window: usize,
    /// Retrain the existing weights instead of re-initializing.
    pub warm_start: bool,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            hidden: vec![64, 64],
            lr: 1e-3,
            minibatch: 64,
            pretrain_epochs: 50,
            retrain_epochs: 20,
            window: 2000,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BcStats {
    /// Mean NLL over the training set after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Fraction of transitions whose greedy action matches on every branch.
    pub accuracy: f64,
}

/// Mean negative log-likelihood of `acts` under `net`, with its gradient
/// accumulated into `grads`.
pub fn nll_and_grad<T: crate::neural::Real>(
    net: &PolicyNet<T>,
    obs: &[T],
    acts: &[usize],
    grads: &mut [T],
) -> Result<f64, BcError> {
    let nb = net.head.branches().len();
    let b = acts.len() / nb;
    if b == 0 {
        return Err(BcError::Empty);
    }
    let k = net.head.n_logits();
    let tape = net.mlp.forward_tape(obs, b)?;
    let logits = tape.output();
    let mut out_grad = vec![T::zero(); b * k];
    let scale = T::from_f64(-1.0 / b as f64);
    let mut loss = 0.0;
    for i in 0..b {
        let z = &logits[i * k..(i + 1) * k];
        let a = &acts[i * nb..(i + 1) * nb];
        loss -= net.head.log_prob(z, a).as_f64();
        net.head.log_prob_grad(z, a, scale, &mut out_grad[i * k..(i + 1) * k]);
    }
    net.mlp.backward(&tape, &out_grad, grads)?;
    Ok(loss / b as f64)
}

/// Mean negative log-likelihood over a transition set.
pub fn mean_nll(net: &PolicyNet<f32>, obs: &[f32], acts: &[usize]) -> Result<f64, BcError> {
    let nb = net.head.branches().len();
    let b = acts.len() / nb;
    if b == 0 {
        return Err(BcError::Empty);
    }
    let k = net.head.n_logits();
    let logits = net.mlp.forward(obs, b)?;
    let total: f64 = (0..b)
        .map(|i| -(net.head.log_prob(&logits[i * k..(i + 1) * k], &acts[i * nb..(i + 1) * nb]) as f64))
        .sum();
    Ok(total / b as f64)
}

/// Greedy-action accuracy over a transition set.
pub fn accuracy(net: &PolicyNet<f32>, obs: &[f32], acts: &[usize]) -> Result<f64, BcError> {
    let nb = net.head.branches().len();
    let b = acts.len() / nb;
    if b == 0 {
        return Err(BcError::Empty);
    }
    let k = net.head.n_logits();
    let logits = net.mlp.forward(obs, b)?;
    let hits = (0..b)
        .filter(|&i| net.head.mode(&logits[i * k..(i + 1) * k]).0 == acts[i * nb..(i + 1) * nb])
        .count();
    Ok(hits as f64 / b as f64)
}

/// Minibatch Adam on mean NLL for `epochs` shuffled passes.
pub fn train_bc(
    net: &mut PolicyNet<f32>,
    opt: &mut Adam<f32>,
    obs: &[f32],
    acts: &[usize],
    epochs: usize,
    minibatch: usize,
    rng: &mut Rng,
) -> Result<BcStats, BcError> {
    let nb = net.head.branches().len();
    let d = net.mlp.input_dim();
    let n = acts.len() / nb;
    if n == 0 {
        return Err(BcError::Empty);
    }
    if obs.len() != n * d {
        return Err(BcError::Malformed(format!("{} observation values for {n} transitions of width {d}", obs.len())));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut grads = vec![0f32; net.mlp.n_params()];
    let mut stats = BcStats::default();
    let (mut bo, mut ba) = (Vec::new(), Vec::new());
    for _ in 0..epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(minibatch.max(1)) {
            bo.clear();
            ba.clear();
            for &i in chunk {
                bo.extend_from_slice(&obs[i * d..(i + 1) * d]);
                ba.extend_from_slice(&acts[i * nb..(i + 1) * nb]);
            }
            grads.iter_mut().for_each(|g| *g = 0.0);
            nll_and_grad(net, &bo, &ba, &mut grads)?;
            opt.step(net.mlp.params_mut(), &grads)?;
        }
        stats.epoch_losses.push(mean_nll(net, obs, acts)?);
    }
    stats.accuracy = accuracy(net, obs, acts)?;
    Ok(stats)
}

/// The behavior-cloning expert with its optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcExpert {
    pub config: BcConfig,
    pub policy: PolicyNet<f32>,
    pub opt: Adam<f32>,
}

impl BcExpert {
    pub fn new(spec: &EnvSpec, config: BcConfig, rng: &mut Rng) -> Self {
        let policy = PolicyNet::new(spec.observation_dim, &config.hidden, &spec.action_branch_cardinalities, rng);
        let opt = Adam::new(policy.mlp.n_params(), AdamConfig { lr: config.lr, ..Default::default() });
        BcExpert { config, policy, opt }
    }

    fn reinit(&mut self, rng: &mut Rng) {
        let mlp = &self.policy.mlp;
        let (d, out) = (mlp.input_dim(), self.policy.head.branches().to_vec());
        self.policy = PolicyNet::new(d, &self.config.hidden, &out, rng);
        self.opt = Adam::new(self.policy.mlp.n_params(), AdamConfig { lr: self.config.lr, ..Default::default() });
    }

    /// Fits the whole dataset for `pretrain_epochs`.
    pub fn pretrain(&mut self, data: &DemoDataset, rng: &mut Rng) -> Result<BcStats, BcError> {
        let (obs, acts) = data.all();
        train_bc(&mut self.policy, &mut self.opt, obs, acts, self.config.pretrain_epochs, self.config.minibatch, rng)
    }

    /// Fits the latest `window` transitions for `retrain_epochs`.
    pub fn retrain(&mut self, data: &DemoDataset, rng: &mut Rng) -> Result<BcStats, BcError> {
        if !self.config.warm_start {
            self.reinit(rng);
        }
        let (obs, acts) = data.latest_window(self.config.window);
        train_bc(&mut self.policy, &mut self.opt, obs, acts, self.config.retrain_epochs, self.config.minibatch, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gaussian;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn traj(obs: &[[f32; 2]], acts: &[usize]) -> Trajectory {
        Trajectory {
            obs: obs.iter().map(|o| o.to_vec()).collect(),
            acts: acts.iter().map(|&a| vec![a]).collect(),
            rews: acts.iter().map(|&a| a as f64).collect(),
        }
    }

    #[test]
    fn dedup_on_append_keeps_first() {
        let mut ds = DemoDataset::new(2, 1, true);
        let kept = ds.append(&traj(&[[0.0, 1.0], [1.0, 1.0], [0.0, 1.0]], &[2, 3, 2])).unwrap();
        assert_eq!(kept, 2);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.action_row(1), &[3]);
        assert_eq!(ds.append(&traj(&[[0.0, 1.0]], &[2])).unwrap(), 0);
        assert_eq!(ds.n_trajectories(), 1);
        assert_eq!(ds.append(&traj(&[[0.0, 1.0]], &[1])).unwrap(), 1);
    }

    #[test]
    fn continuous_dataset_keeps_duplicates() {
        let mut ds = DemoDataset::new(2, 1, false);
        ds.append(&traj(&[[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]], &[1, 1, 1])).unwrap();
        assert_eq!(ds.len(), 3);
    }

    #[test]
    fn explicit_dedup_is_idempotent() {
        let mut ds = DemoDataset::new(2, 1, false);
        ds.append(&traj(&[[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]], &[1, 1, 1])).unwrap();
        ds.append(&traj(&[[1.0, 0.0], [2.0, 0.0]], &[1, 4])).unwrap();
        assert_eq!(ds.dedup(), 2);
        let once = ds.clone();
        assert_eq!(ds.dedup(), 0);
        assert_eq!(ds, once);
        assert_eq!(ds.len(), 3);
        assert!(!ds.dedups());
    }

    #[test]
    fn window_boundaries() {
        let mut ds = DemoDataset::new(1, 1, false);
        let small = Trajectory { obs: vec![vec![0.0]; 500], acts: vec![vec![0]; 500], rews: vec![0.0; 500] };
        ds.append(&small).unwrap();
        assert_eq!(ds.latest_window(2000).1.len(), 500);
        let big = Trajectory {
            obs: (0..4500).map(|i| vec![i as f32]).collect(),
            acts: vec![vec![1]; 4500],
            rews: vec![0.0; 4500],
        };
        ds.append(&big).unwrap();
        let (o, a) = ds.latest_window(2000);
        assert_eq!(a.len(), 2000);
        assert_eq!(o[0], 2500.0);
        assert_eq!(*o.last().unwrap(), 4499.0);
        let (all, _) = ds.all();
        assert_eq!(&all[all.len() - 2000..], o);
    }

    #[test]
    fn episodic_reward_bookkeeping() {
        let mut ds = DemoDataset::new(2, 1, false);
        let t = traj(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], &[1, 2, 4]);
        ds.append(&t).unwrap();
        assert_eq!(ds.trajectory(0).episodic_reward(), 7.0);
        assert_eq!(ds.trajectory(0), t);
    }

    #[test]
    fn validation_rejects_bad_trajectories() {
        let mut t = traj(&[[0.0, 0.0]], &[1]);
        t.rews.push(1.0);
        assert!(t.validate(None).is_err());
        let mut t = traj(&[[f32::NAN, 0.0]], &[1]);
        assert!(t.validate(None).is_err());
        t.obs[0][0] = 0.0;
        let spec = EnvSpec { observation_dim: 2, action_branch_cardinalities: vec![2], max_episode_steps: 5 };
        assert!(t.validate(Some(&spec)).is_ok());
        t.acts[0][0] = 2;
        assert!(t.validate(Some(&spec)).is_err());
        let mut ds = DemoDataset::new(3, 1, false);
        assert!(ds.append(&traj(&[[0.0, 0.0]], &[0])).is_err());
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("demos.jsonl");
        let spec = EnvSpec { observation_dim: 2, action_branch_cardinalities: vec![5], max_episode_steps: 5 };
        let mut ds = DemoDataset::new(2, 1, true);
        ds.append(&traj(&[[0.0, 0.25], [1.0, 0.0]], &[1, 2])).unwrap();
        ds.append(&traj(&[[3.0, 0.5]], &[4])).unwrap();
        ds.save_jsonl(&p).unwrap();
        let first = std::fs::read_to_string(&p).unwrap();
        assert!(first.starts_with("{\"obs\":[[0.0,0.25],[1.0,0.0]],\"acts\":[[1],[2]],\"rews\":[1.0,2.0]}"));
        let back = DemoDataset::load_jsonl(&p, &spec, true).unwrap();
        assert_eq!(back, ds);

        std::fs::write(&p, "{\"obs\":[[0.0,0.0]],\"acts\":[[1]],\"rews\":[]}\n").unwrap();
        assert!(matches!(read_jsonl(&p, Some(&spec)), Err(BcError::Parse { line: 1, .. })));
        std::fs::write(&p, "\nnot json\n").unwrap();
        assert!(matches!(read_jsonl(&p, None), Err(BcError::Parse { line: 2, .. })));
    }

    #[test]
    fn serde_roundtrip_then_reindex() {
        let mut ds = DemoDataset::new(2, 1, true);
        ds.append(&traj(&[[0.0, 0.0]], &[1])).unwrap();
        let mut back: DemoDataset = serde_json::from_str(&serde_json::to_string(&ds).unwrap()).unwrap();
        back.reindex();
        assert_eq!(back.append(&traj(&[[0.0, 0.0]], &[1])).unwrap(), 0);
    }

    fn spec1() -> EnvSpec {
        EnvSpec { observation_dim: 3, action_branch_cardinalities: vec![4], max_episode_steps: 1 }
    }

    #[test]
    fn single_pair_is_fit_exactly() {
        let mut rng = rng::stream(1, "bc1");
        let mut bc = BcExpert::new(&spec1(), BcConfig { hidden: vec![16], ..Default::default() }, &mut rng);
        let obs = [0.3f32, -0.2, 0.9];
        let t = Trajectory { obs: vec![obs.to_vec(); 10], acts: vec![vec![2]; 10], rews: vec![0.0; 10] };
        let mut ds = DemoDataset::new(3, 1, false);
        ds.append(&t).unwrap();
        let stats = bc.pretrain(&ds, &mut rng).unwrap();
        assert_eq!(stats.accuracy, 1.0);
        assert!(stats.epoch_losses.last().unwrap() < &stats.epoch_losses[0]);
    }

    #[test]
    fn conflicting_labels_cap_accuracy() {
        let mut rng = rng::stream(2, "bc2");
        let mut bc = BcExpert::new(&spec1(), BcConfig { hidden: vec![16], ..Default::default() }, &mut rng);
        let t = Trajectory {
            obs: vec![vec![1.0, 0.0, 0.0]; 20],
            acts: (0..20).map(|i| vec![i % 2]).collect(),
            rews: vec![0.0; 20],
        };
        let mut ds = DemoDataset::new(3, 1, false);
        ds.append(&t).unwrap();
        assert!(bc.pretrain(&ds, &mut rng).unwrap().accuracy <= 0.5 + 1e-9);
    }

    #[test]
    fn empty_data_is_an_error() {
        let mut rng = rng::stream(3, "bc3");
        let mut bc = BcExpert::new(&spec1(), BcConfig::default(), &mut rng);
        let ds = DemoDataset::new(3, 1, false);
        assert!(matches!(bc.pretrain(&ds, &mut rng), Err(BcError::Empty)));
    }

    #[test]
    fn retrain_uses_window_and_cold_start_reinitializes() {
        let mut rng = rng::stream(4, "bc4");
        let cfg = BcConfig { hidden: vec![8], window: 5, retrain_epochs: 0, warm_start: false, ..Default::default() };
        let mut bc = BcExpert::new(&spec1(), cfg, &mut rng);
        let before = bc.policy.clone();
        let mut ds = DemoDataset::new(3, 1, false);
        ds.append(&Trajectory { obs: vec![vec![0.0; 3]; 9], acts: vec![vec![1]; 9], rews: vec![0.0; 9] }).unwrap();
        let stats = bc.retrain(&ds, &mut rng).unwrap();
        assert!(stats.epoch_losses.is_empty());
        assert_ne!(bc.policy, before);
    }

    #[test]
    fn nll_decreases_with_small_lr() {
        for seed in 0..5u64 {
            let mut rng = rng::stream(seed, "mono");
            let cfg = BcConfig { hidden: vec![16], lr: 1e-4, pretrain_epochs: 30, ..Default::default() };
            let mut bc = BcExpert::new(&spec1(), cfg, &mut rng);
            let mut ds = DemoDataset::new(3, 1, false);
            let n = 200;
            let t = Trajectory {
                obs: (0..n).map(|_| (0..3).map(|_| gaussian(&mut rng) as f32).collect()).collect(),
                acts: (0..n).map(|_| vec![rng.random_range(0..4)]).collect(),
                rews: vec![0.0; n],
            };
            ds.append(&t).unwrap();
            let l = bc.pretrain(&ds, &mut rng).unwrap().epoch_losses;
            for w in l.windows(2) {
                assert!(w[1] <= w[0] + 1e-3, "seed {seed}: {l:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn no_duplicates_after_dedup(pairs in proptest::collection::vec((0u8..3, 0u8..3, 0usize..2), 1..60)) {
            let t = Trajectory {
                obs: pairs.iter().map(|&(a, b, _)| vec![a as f32, b as f32]).collect(),
                acts: pairs.iter().map(|&(_, _, c)| vec![c]).collect(),
                rews: vec![1.0; pairs.len()],
            };
            let mut ds = DemoDataset::new(2, 1, true);
            ds.append(&t).unwrap();
            let mut seen = HashSet::new();
            for i in 0..ds.len() {
                prop_assert!(seen.insert(ds.key(i)));
            }
            let total: f64 = ds.trajectories().map(|t| t.episodic_reward()).sum();
            prop_assert_eq!(total, ds.len() as f64);
        }
    }
}
