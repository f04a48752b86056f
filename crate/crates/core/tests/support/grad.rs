//! Central finite-difference checks of the training losses in 64-bit.
#![allow(dead_code)]

use rand::Rng as _;
use synril_core::bc::nll_and_grad;
use synril_core::ppo::{combined_loss, policy_loss_and_grad, value_loss_and_grad, PolicyBatch, PolicyLossWeights};
use synril_core::rng::{stream, Rng};
use synril_core::{Mlp, MultiCategorical, PolicyNet};

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    BcNll,
    ClippedPolicy,
    ValueMse,
    Entropy,
    ExpertCrossEntropy,
    Combined,
}

impl Loss {
    pub const ALL: [Loss; 6] =
        [Loss::BcNll, Loss::ClippedPolicy, Loss::ValueMse, Loss::Entropy, Loss::ExpertCrossEntropy, Loss::Combined];
}

/// Relative error of the analytic gradient on instance `seed`.
pub fn check(loss: Loss, seed: u64) -> f64 {
    match loss {
        Loss::BcNll => bc_nll(seed),
        Loss::ClippedPolicy => policy_side(seed, "surrogate", PolicyLossWeights { policy: 1.0, entropy: 0.0, action: 0.0 }, false),
        // Zero advantages make the surrogate constant, leaving -H.
        Loss::Entropy => policy_side(seed, "entropy", PolicyLossWeights { policy: 1.0, entropy: 1.0, action: 0.0 }, true),
        Loss::ExpertCrossEntropy => {
            policy_side(seed, "action", PolicyLossWeights { policy: 1.0, entropy: 0.0, action: 1.0 }, true)
        }
        Loss::ValueMse => value_mse(seed),
        Loss::Combined => combined(seed),
    }
}

/// Largest error over [`INSTANCES`] instances.
pub fn worst(loss: Loss) -> f64 {
    (0..INSTANCES).map(|s| check(loss, s)).fold(0.0, f64::max)
}

fn random_net(rng: &mut Rng) -> PolicyNet<f64> {
    let obs = rng.random_range(2..6);
    let hidden = rng.random_range(3..8);
    let branches: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(2..5)).collect();
    let mut net = PolicyNet::<f64>::new(obs, &[hidden], &branches, rng);
    net.mlp.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
    net
}

fn random_value_net(rng: &mut Rng, obs: usize) -> Mlp<f64> {
    let mut v = Mlp::<f64>::orthogonal(&[obs, rng.random_range(3..8), 1], 1.0, rng);
    v.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
    v
}

fn random_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_actions(rng: &mut Rng, head: &MultiCategorical, batch: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| head.branches().iter().map(|&n| rng.random_range(0..n)).collect::<Vec<_>>()).collect()
}

fn random_dists(rng: &mut Rng, head: &MultiCategorical, batch: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for _ in 0..batch {
        for &n in head.branches() {
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = w.iter().sum();
            out.extend(w.iter().map(|x| x / s));
        }
    }
    out
}

fn fd_error(params: &mut [f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut num = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + EPS;
        let up = loss(params);
        params[i] = orig - EPS;
        let down = loss(params);
        params[i] = orig;
        num[i] = (up - down) / (2.0 * EPS);
    }
    let diff: f64 = analytic.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(&num)).max(1e-8)
}

fn with_params(net: &PolicyNet<f64>, p: &[f64]) -> PolicyNet<f64> {
    let mut n = net.clone();
    n.mlp.params_mut().copy_from_slice(p);
    n
}

/// Old log-probabilities whose ratios stay clear of the clip boundaries so the
/// surrogate is differentiable at the test point.
fn old_log_probs(rng: &mut Rng, net: &PolicyNet<f64>, obs: &[f64], acts: &[usize], clip: f64) -> Vec<f64> {
    let k = net.head.n_logits();
    let nb = net.head.branches().len();
    let logits = net.mlp.forward(obs, acts.len() / nb).unwrap();
    (0..acts.len() / nb)
        .map(|i| {
            let lp = net.head.log_prob(&logits[i * k..(i + 1) * k], &acts[i * nb..(i + 1) * nb]);
            loop {
                let shift: f64 = rng.random_range(-0.4..0.4);
                let r = (-shift).exp();
                if (r - (1.0 - clip)).abs() > 1e-3 && (r - (1.0 + clip)).abs() > 1e-3 {
                    return lp + shift;
                }
            }
        })
        .collect()
}

struct Instance {
    net: PolicyNet<f64>,
    obs: Vec<f64>,
    acts: Vec<usize>,
    batch: usize,
}

fn instance(seed: u64, label: &str) -> (Instance, Rng) {
    let mut rng = stream(seed, label);
    let net = random_net(&mut rng);
    let batch = rng.random_range(1..7);
    let obs = random_vec(&mut rng, batch * net.mlp.input_dim(), 2.0);
    let acts = random_actions(&mut rng, &net.head, batch);
    (Instance { net, obs, acts, batch }, rng)
}

fn bc_nll(seed: u64) -> f64 {
    let (it, _) = instance(seed, "bc");
    let mut g = vec![0.0; it.net.mlp.n_params()];
    nll_and_grad(&it.net, &it.obs, &it.acts, &mut g).unwrap();
    let mut p = it.net.mlp.params().to_vec();
    fd_error(&mut p, &g, |p| nll_and_grad(&with_params(&it.net, p), &it.obs, &it.acts, &mut vec![0.0; p.len()]).unwrap())
}

fn policy_side(seed: u64, label: &str, w: PolicyLossWeights, zero_adv: bool) -> f64 {
    let (it, mut rng) = instance(seed, label);
    let clip = 0.2;
    let old = old_log_probs(&mut rng, &it.net, &it.obs, &it.acts, clip);
    let adv = if zero_adv { vec![0.0; it.batch] } else { random_vec(&mut rng, it.batch, 2.0) };
    let expert = random_dists(&mut rng, &it.net.head, it.batch);
    let batch =
        PolicyBatch { obs: &it.obs, actions: &it.acts, old_log_probs: &old, advantages: &adv, expert_probs: Some(&expert) };
    let mut g = vec![0.0; it.net.mlp.n_params()];
    policy_loss_and_grad(&it.net, &batch, clip, w, &mut g).unwrap();
    let mut p = it.net.mlp.params().to_vec();
    fd_error(&mut p, &g, |p| {
        policy_loss_and_grad(&with_params(&it.net, p), &batch, clip, w, &mut vec![0.0; p.len()]).unwrap().total
    })
}

fn value_mse(seed: u64) -> f64 {
    let mut rng = stream(seed, "value");
    let obs_dim = rng.random_range(2..6);
    let v = random_value_net(&mut rng, obs_dim);
    let batch = rng.random_range(1..7);
    let obs = random_vec(&mut rng, batch * obs_dim, 2.0);
    let ret = random_vec(&mut rng, batch, 3.0);
    let mut g = vec![0.0; v.n_params()];
    value_loss_and_grad(&v, &obs, &ret, 1.0, &mut g).unwrap();
    let mut p = v.params().to_vec();
    fd_error(&mut p, &g, |p| {
        let m = Mlp::from_params(v.dims(), p.to_vec()).unwrap();
        value_loss_and_grad(&m, &obs, &ret, 1.0, &mut vec![0.0; p.len()]).unwrap()
    })
}

/// Policy and value parameters together under random w1, w2, w3 and an
/// entropy bonus.
fn combined(seed: u64) -> f64 {
    let (it, mut rng) = instance(seed, "combined");
    let clip = 0.2;
    let (w1, w2, w3) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
    let ent = rng.random_range(0.0..0.1);
    let w = PolicyLossWeights { policy: w1, entropy: ent, action: w3 };
    let v = random_value_net(&mut rng, it.net.mlp.input_dim());
    let old = old_log_probs(&mut rng, &it.net, &it.obs, &it.acts, clip);
    let adv = random_vec(&mut rng, it.batch, 2.0);
    let ret = random_vec(&mut rng, it.batch, 3.0);
    let expert = random_dists(&mut rng, &it.net.head, it.batch);
    let batch =
        PolicyBatch { obs: &it.obs, actions: &it.acts, old_log_probs: &old, advantages: &adv, expert_probs: Some(&expert) };
    let np = it.net.mlp.n_params();
    let mut g = vec![0.0; np + v.n_params()];
    policy_loss_and_grad(&it.net, &batch, clip, w, &mut g[..np]).unwrap();
    value_loss_and_grad(&v, &it.obs, &ret, w2, &mut g[np..]).unwrap();

    let total = |p: &[f64]| {
        let net = with_params(&it.net, &p[..np]);
        let vm = Mlp::from_params(v.dims(), p[np..].to_vec()).unwrap();
        let s = policy_loss_and_grad(&net, &batch, clip, w, &mut vec![0.0; np]).unwrap();
        let lv = value_loss_and_grad(&vm, &it.obs, &ret, 1.0, &mut vec![0.0; p.len() - np]).unwrap();
        combined_loss(s.policy_loss - ent * s.entropy, lv, s.action_loss, w1, w2, w3)
    };
    let mut p: Vec<f64> = it.net.mlp.params().iter().chain(v.params()).copied().collect();
    fd_error(&mut p, &g, total)
}
