//! Feed-forward networks with hand-derived gradients.
//!
//! An [`Mlp`] keeps all of its parameters in one flat vector: for each layer the
//! weight matrix (`out x in`, row-major) followed by the bias. Gradients use the
//! same layout, so the optimizer and the weight files work on flat slices.
//! Hidden layers use tanh; the last layer is linear.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Action;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("bad weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check(expected: usize, got: usize) -> Result<(), NeuralError> {
    if expected == got {
        Ok(())
    } else {
        Err(NeuralError::Shape { expected, got })
    }
}

/// Floating-point type the networks run in: `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Debug + Default + Send + Sync + 'static
{
    /// `C = alpha * A B + beta * C` with arbitrary strides (see `matrixmultiply`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize, k: usize, n: usize, alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self, c: &mut [Self], rsc: isize, csc: isize,
    );

    fn from_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).unwrap()
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize, k: usize, n: usize, alpha: Self,
                a: &[Self], rsa: isize, csa: isize,
                b: &[Self], rsb: isize, csb: isize,
                beta: Self, c: &mut [Self], rsc: isize, csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices that cover every strided element.
                unsafe {
                    $f(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc)
                }
            }
        }
    };
}
impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Standard normal draw (Box-Muller).
pub fn gaussian(rng: &mut Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `rows x cols` matrix, row-major, with orthonormal rows (or columns, whichever
/// is fewer) scaled by `gain`.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut Rng) -> Vec<f64> {
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(r);
    while q.len() < r {
        let mut v: Vec<f64> = (0..c).map(|_| gaussian(rng)).collect();
        // Modified Gram-Schmidt, twice for stability.
        for _ in 0..2 {
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..r {
        for j in 0..c {
            let (row, col) = if transpose { (j, i) } else { (i, j) };
            out[row * cols + col] = gain * q[i][j];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    dims: Vec<usize>,
    params: Vec<T>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    batch: usize,
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<T>>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().unwrap()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Real> Mlp<T> {
    /// Zero-initialized network.
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2 && dims.iter().all(|&d| d > 0), "bad dims {dims:?}");
        Mlp { dims: dims.to_vec(), params: vec![T::zero(); param_count(dims)] }
    }

    /// Orthogonal weights: gain sqrt(2) on hidden layers and `output_gain` on the
    /// last one; zero biases.
    pub fn orthogonal(dims: &[usize], output_gain: f64, rng: &mut Rng) -> Self {
        let mut mlp = Self::zeros(dims);
        let layers = dims.len() - 1;
        let mut off = 0;
        for l in 0..layers {
            let (i, o) = (dims[l], dims[l + 1]);
            let gain = if l + 1 == layers { output_gain } else { 2f64.sqrt() };
            for (p, w) in mlp.params[off..off + i * o].iter_mut().zip(orthogonal(o, i, gain, rng)) {
                *p = T::from_f64(w);
            }
            off += i * o + o;
        }
        mlp
    }

    pub fn from_params(dims: &[usize], params: Vec<T>) -> Result<Self, NeuralError> {
        check(param_count(dims), params.len())?;
        Ok(Mlp { dims: dims.to_vec(), params })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// (weights, bias) of layer `l`.
    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let off = self.offset(l);
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        (&self.params[off..off + i * o], &self.params[off + i * o..off + i * o + o])
    }

    fn offset(&self, l: usize) -> usize {
        param_count(&self.dims[..=l])
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp { dims: self.dims.clone(), params: self.params.iter().map(|p| U::from_f64(p.as_f64())).collect() }
    }

    /// Output for a `batch x input_dim` row-major input.
    pub fn forward(&self, input: &[T], batch: usize) -> Result<Vec<T>, NeuralError> {
        Ok(self.forward_tape(input, batch)?.acts.pop().unwrap())
    }

    pub fn forward_tape(&self, input: &[T], batch: usize) -> Result<Tape<T>, NeuralError> {
        check(batch * self.input_dim(), input.len())?;
        let layers = self.dims.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(input.to_vec());
        for l in 0..layers {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let (w, b) = self.layer(l);
            let mut z = Vec::with_capacity(batch * o);
            for _ in 0..batch {
                z.extend_from_slice(b);
            }
            let x = &acts[l];
            T::gemm(batch, i, o, T::one(), x, i as isize, 1, w, 1, i as isize, T::one(), &mut z, o as isize, 1);
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        Ok(Tape { batch, acts })
    }

    /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output).
    pub fn backward(&self, tape: &Tape<T>, output_grad: &[T], grads: &mut [T]) -> Result<(), NeuralError> {
        let batch = tape.batch;
        check(batch * self.output_dim(), output_grad.len())?;
        check(self.params.len(), grads.len())?;
        check(self.dims.len(), tape.acts.len())?;
        let layers = self.dims.len() - 1;
        let mut delta = output_grad.to_vec();
        for l in (0..layers).rev() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            if l + 1 < layers {
                for (d, a) in delta.iter_mut().zip(&tape.acts[l + 1]) {
                    *d *= T::one() - *a * *a;
                }
            }
            let off = self.offset(l);
            let (gw, gb) = grads[off..off + i * o + o].split_at_mut(i * o);
            // dW (o x i) += delta^T (o x B) * x (B x i)
            T::gemm(o, batch, i, T::one(), &delta, 1, o as isize, &tape.acts[l], i as isize, 1, T::one(), gw, i as isize, 1);
            for row in delta.chunks_exact(o) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += *d;
                }
            }
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut prev = vec![T::zero(); batch * i];
                // dX (B x i) = delta (B x o) * W (o x i)
                T::gemm(batch, o, i, T::one(), &delta, o as isize, 1, w, i as isize, 1, T::zero(), &mut prev, i as isize, 1);
                delta = prev;
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / (norm + 1e-6));
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Independent categorical distributions, one per action branch, over
/// consecutive slices of a logit vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiCategorical {
    branches: Vec<usize>,
}

impl MultiCategorical {
    pub fn new(branches: &[usize]) -> Self {
        assert!(!branches.is_empty() && branches.iter().all(|&b| b > 0));
        MultiCategorical { branches: branches.to_vec() }
    }

    pub fn branches(&self) -> &[usize] {
        &self.branches
    }

    pub fn n_logits(&self) -> usize {
        self.branches.iter().sum()
    }

    fn spans(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.branches.iter().scan(0, |off, &b| {
            let r = *off..*off + b;
            *off += b;
            Some(r)
        })
    }

    /// Per-branch log-softmax of `logits`.
    pub fn log_probs<T: Real>(&self, logits: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); logits.len()];
        for r in self.spans() {
            let z = &logits[r.clone()];
            let m = z.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = m + z.iter().map(|&v| (v - m).exp()).fold(T::zero(), |a, b| a + b).ln();
            for (o, &v) in out[r].iter_mut().zip(z) {
                *o = v - lse;
            }
        }
        out
    }

    pub fn probs<T: Real>(&self, logits: &[T]) -> Vec<T> {
        self.log_probs(logits).into_iter().map(|l| l.exp()).collect()
    }

    /// Sum over branches of log p(a_i).
    pub fn log_prob<T: Real>(&self, logits: &[T], action: &[usize]) -> T {
        let lp = self.log_probs(logits);
        self.spans().zip(action).fold(T::zero(), |acc, (r, &a)| acc + lp[r.start + a])
    }

    /// Sum of per-branch entropies.
    pub fn entropy<T: Real>(&self, logits: &[T]) -> T {
        let lp = self.log_probs(logits);
        lp.iter().fold(T::zero(), |acc, &l| acc - l.exp() * l)
    }

    /// `-sum_a target(a) log p(a)`, summed over branches. `target` holds one
    /// distribution per branch in the same layout as the logits.
    pub fn cross_entropy<T: Real>(&self, target: &[T], logits: &[T]) -> T {
        let lp = self.log_probs(logits);
        target.iter().zip(&lp).fold(T::zero(), |acc, (&q, &l)| acc - q * l)
    }

    /// `out += scale * d log p(action) / d logits`.
    pub fn log_prob_grad<T: Real>(&self, logits: &[T], action: &[usize], scale: T, out: &mut [T]) {
        let p = self.probs(logits);
        for (r, &a) in self.spans().zip(action) {
            for j in r.clone() {
                let ind = if j - r.start == a { T::one() } else { T::zero() };
                out[j] += scale * (ind - p[j]);
            }
        }
    }

    /// `out += scale * d entropy / d logits`.
    pub fn entropy_grad<T: Real>(&self, logits: &[T], scale: T, out: &mut [T]) {
        let lp = self.log_probs(logits);
        for r in self.spans() {
            let h = lp[r.clone()].iter().fold(T::zero(), |acc, &l| acc - l.exp() * l);
            for j in r {
                out[j] += scale * (-(lp[j].exp()) * (lp[j] + h));
            }
        }
    }

    /// `out += scale * d cross_entropy(target, .) / d logits`.
    pub fn cross_entropy_grad<T: Real>(&self, target: &[T], logits: &[T], scale: T, out: &mut [T]) {
        let p = self.probs(logits);
        for r in self.spans() {
            let mass = target[r.clone()].iter().fold(T::zero(), |a, &b| a + b);
            for j in r {
                out[j] += scale * (p[j] * mass - target[j]);
            }
        }
    }

    pub fn sample<T: Real>(&self, logits: &[T], rng: &mut Rng) -> Action {
        let p = self.probs(logits);
        Action(
            self.spans()
                .map(|r| {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let last = r.end - r.start - 1;
                    for (i, j) in r.enumerate() {
                        acc += p[j].as_f64();
                        if u < acc {
                            return i;
                        }
                    }
                    last
                })
                .collect(),
        )
    }

    /// Most likely value per branch; ties go to the lower value.
    pub fn mode<T: Real>(&self, logits: &[T]) -> Action {
        Action(
            self.spans()
                .map(|r| {
                    let z = &logits[r];
                    let mut best = 0;
                    for (i, v) in z.iter().enumerate() {
                        if *v > z[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect(),
        )
    }
}

/// A network whose output feeds a [`MultiCategorical`] head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet<T> {
    pub mlp: Mlp<T>,
    pub head: MultiCategorical,
}

impl<T: Real> PolicyNet<T> {
    /// Orthogonal init with a small output gain so the initial policy is close
    /// to uniform.
    pub fn new(obs_dim: usize, hidden: &[usize], branches: &[usize], rng: &mut Rng) -> Self {
        let head = MultiCategorical::new(branches);
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        dims.push(head.n_logits());
        PolicyNet { mlp: Mlp::orthogonal(&dims, 0.01, rng), head }
    }

    pub fn from_mlp(mlp: Mlp<T>, branches: &[usize]) -> Result<Self, NeuralError> {
        let head = MultiCategorical::new(branches);
        check(head.n_logits(), mlp.output_dim())?;
        Ok(PolicyNet { mlp, head })
    }

    pub fn logits(&self, obs: &[T]) -> Result<Vec<T>, NeuralError> {
        self.mlp.forward(obs, 1)
    }

    pub fn act(&self, obs: &[T], rng: &mut Rng) -> Result<(Action, T), NeuralError> {
        let logits = self.logits(obs)?;
        let a = self.head.sample(&logits, rng);
        let lp = self.head.log_prob(&logits, &a.0);
        Ok((a, lp))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Adam { config, m: vec![T::zero(); n_params], v: vec![T::zero(); n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<(), NeuralError> {
        check(self.m.len(), params.len())?;
        check(self.m.len(), grads.len())?;
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"SNNW";
const WEIGHTS_VERSION: u32 = 1;

/// Writes `dims` and a flat f32 payload: magic `SNNW`, u32 version, u32 number
/// of dims, u32 dims, then the parameters, all little-endian.
pub fn write_flat(mut w: impl Write, dims: &[usize], payload: &[f32]) -> Result<(), NeuralError> {
    check(param_count(dims), payload.len())?;
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(payload.len() * 4);
    for p in payload {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_flat(mut r: impl Read) -> Result<(Vec<usize>, Vec<f32>), NeuralError> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if &word != WEIGHTS_MAGIC {
        return Err(NeuralError::Format("bad magic".into()));
    }
    let mut u32_le = |r: &mut dyn Read| -> Result<u32, NeuralError> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = u32_le(&mut r)?;
    if version != WEIGHTS_VERSION {
        return Err(NeuralError::Format(format!("unsupported version {version}")));
    }
    let n = u32_le(&mut r)? as usize;
    if !(2..=64).contains(&n) {
        return Err(NeuralError::Format(format!("implausible layer count {n}")));
    }
    let dims: Vec<usize> = (0..n).map(|_| u32_le(&mut r).map(|d| d as usize)).collect::<Result<_, _>>()?;
    if dims.iter().any(|&d| d == 0) {
        return Err(NeuralError::Format("zero-width layer".into()));
    }
    let count = param_count(&dims);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(NeuralError::Format(format!("payload is {} bytes, expected {}", bytes.len(), count * 4)));
    }
    let payload = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((dims, payload))
}

impl Mlp<f32> {
    pub fn write_to(&self, w: impl Write) -> Result<(), NeuralError> {
        write_flat(w, &self.dims, &self.params)
    }

    pub fn read_from(r: impl Read) -> Result<Self, NeuralError> {
        let (dims, params) = read_flat(r)?;
        Mlp::from_params(&dims, params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NeuralError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NeuralError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
