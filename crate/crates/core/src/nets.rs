//! Small feed-forward networks with hand-written reverse-mode gradients.
//!
//! Hidden layers use `tanh`; the output layer is affine. Parameters of an
//! [`Mlp`] live in one flat vector, layer by layer, each layer stored as a
//! row-major `out x in` weight matrix followed by its bias.

use rand::Rng;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input has dimension {found}, network expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("forward cache does not match this network")]
    CacheMismatch,
    #[error("parameter/gradient shapes differ ({params} vs {grads})")]
    ShapeMismatch { params: usize, grads: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything made of flat parameter arrays in a fixed order.
pub trait Parameterized {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn set_flat(&mut self, values: &[f64]) {
        let mut at = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&values[at..at + s.len()]);
            at += s.len();
        }
    }

    fn fill(&mut self, value: f64) {
        for s in self.slices_mut() {
            s.fill(value);
        }
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediate values retained by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input seen by each layer.
    inputs: Vec<Vec<f64>>,
}

impl Mlp {
    /// Zero-initialized network with the given layer widths (`[in, h1, ..., out]`).
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output widths");
        assert!(sizes.iter().all(|&s| s > 0), "layer widths must be positive");
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut mlp = Mlp::zeros(sizes);
        for l in 0..mlp.num_layers() {
            let bound = 1.0 / (mlp.sizes[l] as f64).sqrt();
            let (w, _) = mlp.layer_mut(l);
            w.iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
        }
        mlp
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(weights, bias)` for one layer.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let start = self.offset(l);
        let (w, rest) = self.params[start..start + i * o + o].split_at(i * o);
        (w, rest)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let start = self.offset(l);
        self.params[start..start + i * o + o].split_at_mut(i * o)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache), NetError> {
        if input.len() != self.input_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut x = input.to_vec();
        let mut at = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[at..at + n_in * n_out];
            let b = &self.params[at + n_in * n_out..at + n_in * n_out + n_out];
            at += n_in * n_out + n_out;
            let mut z: Vec<f64> = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut x, z));
        }
        Ok((x, MlpCache { inputs }))
    }

    /// Output only.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        self.forward(input).map(|(y, _)| y)
    }

    /// Accumulates `d(upstream . output)/d(params)` into `grad` and returns the input gradient.
    pub fn backward_into(
        &self,
        cache: &MlpCache,
        upstream: &[f64],
        grad: &mut Mlp,
    ) -> Result<Vec<f64>, NetError> {
        let layers = self.num_layers();
        if cache.inputs.len() != layers
            || cache.inputs.iter().zip(&self.sizes).any(|(x, &s)| x.len() != s)
            || grad.sizes != self.sizes
        {
            return Err(NetError::CacheMismatch);
        }
        if upstream.len() != self.output_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.output_dim(),
                found: upstream.len(),
            });
        }
        let mut delta = upstream.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let x = &cache.inputs[l];
            let (w, _) = self.layer(l);
            let (gw, gb) = grad.layer_mut(l);
            let mut g_in = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                gb[o] += d;
                let row = &w[o * n_in..(o + 1) * n_in];
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += d * x[i];
                    g_in[i] += row[i] * d;
                }
            }
            if l > 0 {
                // x is tanh of the previous pre-activation
                for (g, xi) in g_in.iter_mut().zip(x) {
                    *g *= 1.0 - xi * xi;
                }
            }
            delta = g_in;
        }
        Ok(delta)
    }

    pub fn backward(&self, cache: &MlpCache, upstream: &[f64]) -> Result<(Mlp, Vec<f64>), NetError> {
        let mut grad = Mlp::zeros(&self.sizes);
        let input_grad = self.backward_into(cache, upstream, &mut grad)?;
        Ok((grad, input_grad))
    }
}

impl Parameterized for Mlp {
    fn slices(&self) -> Vec<&[f64]> {
        vec![&self.params]
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.params]
    }
}

/// Diagonal Gaussian policy with a state-independent `log_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
}

impl PolicyParams {
    pub fn init<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], act_dim: usize, rng: &mut R) -> Self {
        let sizes: Vec<usize> = std::iter::once(obs_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(act_dim))
            .collect();
        PolicyParams {
            mean: Mlp::init(&sizes, rng),
            log_std: vec![0.0; act_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParams {
            mean: Mlp::zeros(self.mean.sizes()),
            log_std: vec![0.0; self.log_std.len()],
        }
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn clamp_log_std(&mut self) {
        for v in &mut self.log_std {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
}

impl Parameterized for PolicyParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.mean.params(), &self.log_std]
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.mean.params_mut(), &mut self.log_std]
    }
}

/// One independent value network per reward branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueParams {
    pub branches: Vec<Mlp>,
}

impl ValueParams {
    pub fn init<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], branches: usize, rng: &mut R) -> Self {
        let sizes: Vec<usize> = std::iter::once(obs_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        ValueParams {
            branches: (0..branches).map(|_| Mlp::init(&sizes, rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ValueParams {
            branches: self.branches.iter().map(|b| Mlp::zeros(b.sizes())).collect(),
        }
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn forward(&self, obs: &[f64]) -> Result<Vec<f64>, NetError> {
        self.branches
            .iter()
            .map(|b| b.predict(obs).map(|y| y[0]))
            .collect()
    }
}

impl Parameterized for ValueParams {
    fn slices(&self) -> Vec<&[f64]> {
        self.branches.iter().map(|b| b.params()).collect()
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.branches.iter_mut().map(|b| b.params_mut()).collect()
    }
}

pub fn value_forward(params: &ValueParams, obs: &[f64]) -> Result<Vec<f64>, NetError> {
    params.forward(obs)
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_logprob(mu: &[f64], log_std: &[f64], action: &[f64]) -> Result<f64, NetError> {
    gaussian_logprob_grad(mu, log_std, action).map(|g| g.logp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogProbGrad {
    pub logp: f64,
    pub d_mu: Vec<f64>,
    pub d_log_std: Vec<f64>,
}

pub fn gaussian_logprob_grad(mu: &[f64], log_std: &[f64], action: &[f64]) -> Result<LogProbGrad, NetError> {
    let d = mu.len();
    for other in [log_std.len(), action.len()] {
        if other != d {
            return Err(NetError::DimensionMismatch { expected: d, found: other });
        }
    }
    if d == 0 {
        return Err(NetError::DimensionMismatch { expected: 1, found: 0 });
    }
    let mut logp = -0.5 * d as f64 * (2.0 * PI).ln();
    let mut d_mu = Vec::with_capacity(d);
    let mut d_log_std = Vec::with_capacity(d);
    for i in 0..d {
        let inv_std = (-log_std[i]).exp();
        let z = (action[i] - mu[i]) * inv_std;
        logp -= 0.5 * z * z + log_std[i];
        d_mu.push(z * inv_std);
        d_log_std.push(z * z - 1.0);
    }
    Ok(LogProbGrad { logp, d_mu, d_log_std })
}

/// Differential entropy of a diagonal Gaussian; its gradient w.r.t. each `log_std` is 1.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().sum::<f64>() + 0.5 * log_std.len() as f64 * (1.0 + (2.0 * PI).ln())
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameterized>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<(), NetError> {
        let (np, ng) = (params.num_params(), grads.num_params());
        if np != ng || np != self.m.len() {
            return Err(NetError::ShapeMismatch { params: np.max(self.m.len()), grads: ng });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut at = 0;
        for (p, g) in params.slices_mut().into_iter().zip(grads.slices()) {
            if p.len() != g.len() {
                return Err(NetError::ShapeMismatch { params: p.len(), grads: g.len() });
            }
            for (j, (pj, gj)) in p.iter_mut().zip(g).enumerate() {
                let m = &mut self.m[at + j];
                let v = &mut self.v[at + j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *pj -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            at += p.len();
        }
        Ok(())
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<P: Parameterized>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / (norm + 1e-12));
    }
    norm
}

const CHECKPOINT_MAGIC: &str = "ahrs-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

fn write_mlp(out: &mut String, name: &str, mlp: &Mlp) {
    let sizes: Vec<String> = mlp.sizes().iter().map(|s| s.to_string()).collect();
    let _ = writeln!(out, "mlp {name} {}", sizes.join(","));
    for l in 0..mlp.num_layers() {
        let (w, b) = mlp.layer(l);
        write_array(out, &format!("{name}.{l}.weight"), &[mlp.sizes[l + 1], mlp.sizes[l]], w);
        write_array(out, &format!("{name}.{l}.bias"), &[mlp.sizes[l + 1]], b);
    }
}

fn write_array(out: &mut String, name: &str, shape: &[usize], values: &[f64]) {
    let dims: Vec<String> = shape.iter().map(|s| s.to_string()).collect();
    let _ = write!(out, "array {name} {}", dims.join("x"));
    for v in values {
        // `{:?}` prints the shortest representation that round-trips exactly
        let _ = write!(out, " {v:?}");
    }
    out.push('\n');
}

/// Text checkpoint of a policy and its value branches.
///
/// ```text
/// ahrs-checkpoint 1
/// mlp policy.mean 6,64,64,2
/// array policy.mean.0.weight 64x6 <values...>
/// array policy.mean.0.bias 64 <values...>
/// ...
/// array policy.log_std 2 <values...>
/// branches 5
/// mlp value.0 6,64,64,1
/// ...
/// end
/// ```
pub fn checkpoint_string(policy: &PolicyParams, value: &ValueParams) -> String {
    let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
    write_mlp(&mut out, "policy.mean", &policy.mean);
    write_array(&mut out, "policy.log_std", &[policy.log_std.len()], &policy.log_std);
    let _ = writeln!(out, "branches {}", value.branches.len());
    for (k, b) in value.branches.iter().enumerate() {
        write_mlp(&mut out, &format!("value.{k}"), b);
    }
    out.push_str("end\n");
    out
}

pub fn save_checkpoint(path: &Path, policy: &PolicyParams, value: &ValueParams) -> Result<(), NetError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(checkpoint_string(policy, value).as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, ValueParams), NetError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    parse_checkpoint(&lines.join("\n"))
}

pub fn parse_checkpoint(text: &str) -> Result<(PolicyParams, ValueParams), NetError> {
    let bad = |msg: String| NetError::Checkpoint(msg);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    if header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
        return Err(bad(format!("unsupported header `{header}`")));
    }

    let read_array = |name: &str, len: usize, lines: &mut std::str::Lines| -> Result<Vec<f64>, NetError> {
        let line = lines.next().ok_or_else(|| bad(format!("missing array {name}")))?;
        let mut it = line.split_whitespace();
        if it.next() != Some("array") || it.next() != Some(name) {
            return Err(bad(format!("expected array {name}, found `{}`", truncate(line))));
        }
        it.next().ok_or_else(|| bad(format!("{name}: missing shape")))?;
        let values: Vec<f64> = it
            .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{name}: {e}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != len {
            return Err(bad(format!("{name}: expected {len} values, found {}", values.len())));
        }
        Ok(values)
    };

    let read_mlp = |name: &str, lines: &mut std::str::Lines| -> Result<Mlp, NetError> {
        let line = lines.next().ok_or_else(|| bad(format!("missing mlp {name}")))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "mlp" || parts[1] != name {
            return Err(bad(format!("expected mlp {name}, found `{}`", truncate(line))));
        }
        let sizes: Vec<usize> = parts[2]
            .split(',')
            .map(|s| s.parse().map_err(|e| bad(format!("{name} sizes: {e}"))))
            .collect::<Result<_, _>>()?;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(bad(format!("{name}: invalid sizes")));
        }
        let mut mlp = Mlp::zeros(&sizes);
        for l in 0..mlp.num_layers() {
            let w = read_array(&format!("{name}.{l}.weight"), sizes[l] * sizes[l + 1], lines)?;
            let b = read_array(&format!("{name}.{l}.bias"), sizes[l + 1], lines)?;
            let (lw, lb) = mlp.layer_mut(l);
            lw.copy_from_slice(&w);
            lb.copy_from_slice(&b);
        }
        Ok(mlp)
    };

    let mean = read_mlp("policy.mean", &mut lines)?;
    let log_std = read_array("policy.log_std", mean.output_dim(), &mut lines)?;
    let count_line = lines.next().unwrap_or_default();
    let count: usize = count_line
        .strip_prefix("branches ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| bad(format!("expected branch count, found `{}`", truncate(count_line))))?;
    let branches = (0..count)
        .map(|k| read_mlp(&format!("value.{k}"), &mut lines))
        .collect::<Result<Vec<_>, _>>()?;
    if lines.next() != Some("end") {
        return Err(bad("missing end marker".into()));
    }
    Ok((PolicyParams { mean, log_std }, ValueParams { branches }))
}

fn truncate(s: &str) -> &str {
    &s[..s.len().min(60)]
}
