//! MLP noise predictor with hand-written backpropagation and Adam.
//!
//! Input rows are `[x_t, embed(t)]`; hidden layers use SiLU, the output layer
//! is linear. Layer `l` computes `h_{l+1} = act(h_l · W_l + b_l)` with
//! `W_l` stored as `fan_in × fan_out`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;

use crate::diffusion::{forward_diffuse_rows, DiffusionSchedule, NoisePredictor};
use crate::rng::{derived_rng, stream};
use crate::{Batch, Error, NoiseBatch, Result};

pub const ACTIVATION: &str = "silu";

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Geometric frequencies from 1 to 1000.
fn frequencies(half: usize) -> impl Iterator<Item = f64> {
    (0..half).map(move |k| {
        if half == 1 {
            1.0
        } else {
            1000f64.powf(k as f64 / (half - 1) as f64)
        }
    })
}

/// Sinusoidal embedding of `t / T`: `e/2` sines followed by `e/2` cosines.
pub fn embed_time(t: usize, total: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::arg(format!("embedding dimension {dim} is odd")));
    }
    if total == 0 || t > total {
        return Err(Error::arg(format!("step {t} outside 0..={total}")));
    }
    let s = t as f64 / total as f64;
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    out.extend(frequencies(half).map(|w| (w * s).sin()));
    out.extend(frequencies(half).map(|w| (w * s).cos()));
    Ok(out)
}

/// Weights and biases of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    layer_dims: Vec<usize>,
    time_dim: usize,
    total_steps: usize,
    layers: Vec<Dense>,
}

/// Gradients, shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
        .collect()
}

struct Trace {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl DenoiserModel {
    /// Randomly initialized model. `layer_dims[0]` must equal
    /// `layer_dims.last() + time_dim`. Every parameter is drawn uniformly from
    /// `±1/√fan_in`.
    pub fn new(layer_dims: &[usize], time_dim: usize, total_steps: usize, seed: u64) -> Result<Self> {
        Self::validate_dims(layer_dims, time_dim, total_steps)?;
        let mut rng = derived_rng(seed, stream::INIT, 0);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut draw = || rng.gen_range(-bound..=bound);
                let weight = Array2::from_shape_simple_fn((w[0], w[1]), &mut draw);
                let bias = Array1::from_shape_simple_fn(w[1], &mut draw);
                Dense { weight, bias }
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            time_dim,
            total_steps,
            layers,
        })
    }

    /// `data_dim → hidden × hidden_layers → data_dim`.
    pub fn mlp(
        data_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        time_dim: usize,
        total_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut dims = vec![data_dim + time_dim];
        dims.extend(std::iter::repeat(hidden).take(hidden_layers));
        dims.push(data_dim);
        Self::new(&dims, time_dim, total_steps, seed)
    }

    pub fn from_layers(layers: Vec<Dense>, time_dim: usize, total_steps: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::arg("model needs at least one layer"));
        }
        let mut layer_dims = vec![layers[0].weight.nrows()];
        for (k, l) in layers.iter().enumerate() {
            if l.weight.nrows() != *layer_dims.last().unwrap() || l.bias.len() != l.weight.ncols() {
                return Err(Error::dim(format!("layer {k} has incompatible shapes")));
            }
            layer_dims.push(l.weight.ncols());
        }
        Self::validate_dims(&layer_dims, time_dim, total_steps)?;
        if !layers.iter().all(Dense::is_finite) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self {
            layer_dims,
            time_dim,
            total_steps,
            layers,
        })
    }

    fn validate_dims(dims: &[usize], time_dim: usize, total_steps: usize) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::dim(format!("invalid layer dims {dims:?}")));
        }
        if dims[0] != dims[dims.len() - 1] + time_dim {
            return Err(Error::dim(format!(
                "input width {} != output width {} + time dim {time_dim}",
                dims[0],
                dims[dims.len() - 1]
            )));
        }
        if time_dim % 2 != 0 {
            return Err(Error::arg(format!("time dim {time_dim} is odd")));
        }
        if total_steps == 0 {
            return Err(Error::arg("total steps must be at least 1"));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn data_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    fn input(&self, x: &Array2<f64>, steps: &[usize]) -> Result<Array2<f64>> {
        let (n, d) = x.dim();
        if d != self.data_dim() {
            return Err(Error::dim(format!("model expects {} dims, got {d}", self.data_dim())));
        }
        if steps.len() != n {
            return Err(Error::dim(format!("{} steps for {n} rows", steps.len())));
        }
        let mut input = Array2::zeros((n, d + self.time_dim));
        input.slice_mut(s![.., ..d]).assign(x);
        if self.time_dim > 0 {
            for (mut row, &t) in input.rows_mut().into_iter().zip(steps) {
                let e = embed_time(t, self.total_steps, self.time_dim)?;
                row.slice_mut(s![d..]).assign(&Array1::from(e));
            }
        }
        Ok(input)
    }

    fn run(&self, x: &Array2<f64>, steps: &[usize]) -> Result<Trace> {
        let mut h = self.input(x, steps)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            inputs.push(h);
            if k == last {
                h = z;
            } else {
                h = z.mapv(silu);
                pre.push(z);
            }
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite activation in forward pass".into()));
        }
        Ok(Trace {
            inputs,
            pre,
            output: h,
        })
    }

    /// `ε̂(x_t, t)` for each row.
    pub fn forward(&self, x_t: &Batch, steps: &[usize]) -> Result<Batch> {
        Batch::new(self.run(x_t.points(), steps)?.output)
    }

    fn backward(&self, trace: &Trace, mut delta: Array2<f64>) -> Gradients {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let weight = trace.inputs[k].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut prev = delta.dot(&self.layers[k].weight.t());
                Zip::from(&mut prev)
                    .and(&trace.pre[k - 1])
                    .for_each(|g, &z| *g *= silu_grad(z));
                delta = prev;
            }
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        Gradients { layers: grads }
    }

    /// Mean squared error between `ε̂(x_t, t)` and `target`, with gradients.
    pub fn mse_and_grads(
        &self,
        x_t: &Batch,
        steps: &[usize],
        target: &Array2<f64>,
    ) -> Result<(f64, Gradients)> {
        let trace = self.run(x_t.points(), steps)?;
        if trace.output.dim() != target.dim() {
            return Err(Error::dim("target shape differs from model output"));
        }
        let count = target.len() as f64;
        let diff = &trace.output - target;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / count;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss}")));
        }
        let delta = diff * (2.0 / count);
        Ok((loss, self.backward(&trace, delta)))
    }
}

impl NoisePredictor for DenoiserModel {
    fn dim(&self) -> usize {
        self.data_dim()
    }

    fn predict(&self, x_t: &Batch, steps: &[usize]) -> Result<Batch> {
        self.forward(x_t, steps)
    }
}

/// Noise-prediction loss on `(x0, ε, t)` and its exact gradient.
pub fn loss_and_grads(
    model: &DenoiserModel,
    x0: &Batch,
    eps: &NoiseBatch,
    steps: &[usize],
    sched: &DiffusionSchedule,
) -> Result<(f64, Gradients)> {
    let x_t = forward_diffuse_rows(x0, eps, steps, sched)?;
    model.mse_and_grads(&x_t, steps, eps.points())
}

fn param(m: &mut DenoiserModel, layer: usize, part: usize, k: usize) -> &mut f64 {
    let l = &mut m.layers[layer];
    match part {
        0 => &mut slice_mut(&mut l.weight)[k],
        _ => &mut slice_mut(&mut l.bias)[k],
    }
}

/// Central-difference gradient of [`loss_and_grads`]'s loss with step `h`,
/// in [`Gradients::flatten`] order. Slow; meant for checking.
pub fn numeric_gradients(
    model: &DenoiserModel,
    x0: &Batch,
    eps: &NoiseBatch,
    steps: &[usize],
    sched: &DiffusionSchedule,
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.parameter_count());
    let loss = |m: &DenoiserModel| loss_and_grads(m, x0, eps, steps, sched).map(|r| r.0);
    for layer in 0..probe.layers.len() {
        for part in 0..2 {
            let len = match part {
                0 => probe.layers[layer].weight.len(),
                _ => probe.layers[layer].bias.len(),
            };
            for k in 0..len {
                let orig = *param(&mut probe, layer, part, k);
                *param(&mut probe, layer, part, k) = orig + h;
                let up = loss(&probe)?;
                *param(&mut probe, layer, part, k) = orig - h;
                let down = loss(&probe)?;
                *param(&mut probe, layer, part, k) = orig;
                out.push((up - down) / (2.0 * h));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// One bias-corrected Adam update on flat slices. `step` is the 1-based
/// index of this update.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamConfig,
) {
    let c1 = 1.0 - cfg.beta1.powf(step as f64);
    let c2 = 1.0 - cfg.beta2.powf(step as f64);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Dense>,
    second: Vec<Dense>,
}

impl OptimizerState {
    pub fn new(model: &DenoiserModel, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Dense> = model.layers.iter().map(Dense::zeros_like).collect();
        Ok(Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn first_moments(&self) -> &[Dense] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Dense] {
        &self.second
    }
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

pub fn optimizer_step(
    model: &mut DenoiserModel,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    if grads.layers.len() != model.layers.len()
        || grads
            .layers
            .iter()
            .zip(&model.layers)
            .any(|(g, p)| g.weight.dim() != p.weight.dim() || g.bias.dim() != p.bias.dim())
    {
        return Err(Error::dim("gradient shapes differ from model"));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    state.step += 1;
    let cfg = state.config;
    for (((p, g), m), v) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        adam_update(
            slice_mut(&mut p.weight),
            slice(&g.weight),
            slice_mut(&mut m.weight),
            slice_mut(&mut v.weight),
            state.step,
            &cfg,
        );
        adam_update(
            slice_mut(&mut p.bias),
            slice(&g.bias),
            slice_mut(&mut m.bias),
            slice_mut(&mut v.bias),
            state.step,
            &cfg,
        );
    }
    if !model.is_finite() {
        return Err(Error::Numeric("non-finite parameter after update".into()));
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "immiscible-denoiser-checkpoint 1";

/// Everything needed to rebuild a model for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub optimizer: AdamConfig,
    /// `(beta_start, beta_end)` of the linear schedule the model was trained on.
    pub beta_range: (f64, f64),
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

impl Checkpoint {
    /// Text document; floats carry 17 significant digits so a reload
    /// reproduces every parameter exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let dims: Vec<String> = m.layer_dims.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "layer_dims {}", dims.join(" "));
        let _ = writeln!(out, "activation {ACTIVATION}");
        let _ = writeln!(out, "time_dim {}", m.time_dim);
        let _ = writeln!(out, "total_steps {}", m.total_steps);
        let _ = writeln!(
            out,
            "beta_range {} {}",
            fmt17(self.beta_range.0),
            fmt17(self.beta_range.1)
        );
        let o = &self.optimizer;
        let _ = writeln!(
            out,
            "optimizer adam lr={} beta1={} beta2={} eps={}",
            fmt17(o.lr),
            fmt17(o.beta1),
            fmt17(o.beta2),
            fmt17(o.eps)
        );
        for (k, layer) in m.layers.iter().enumerate() {
            let (r, c) = layer.weight.dim();
            let _ = writeln!(out, "weight {k} {r} {c}");
            for row in layer.weight.rows() {
                let vals: Vec<String> = row.iter().map(|&v| fmt17(v)).collect();
                let _ = writeln!(out, "{}", vals.join(" "));
            }
            let _ = writeln!(out, "bias {k} {}", layer.bias.len());
            let vals: Vec<String> = layer.bias.iter().map(|&v| fmt17(v)).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file, expected {what}")))
        };
        let floats = |line: usize, s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad(line, &format!("bad number {t:?}"))))
                .collect()
        };
        let keyed = |(line, s): (usize, &str), key: &str| -> Result<(usize, String)> {
            s.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(|r| (line, r.to_string()))
                .ok_or_else(|| bad(line, &format!("expected `{key}`")))
        };
        let usize_of = |line: usize, s: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| bad(line, &format!("bad integer {s:?}")))
        };

        let (line, magic) = next("header")?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(bad(line, "not a denoiser checkpoint"));
        }
        let (line, dims) = keyed(next("layer_dims")?, "layer_dims")?;
        let layer_dims = dims
            .split_whitespace()
            .map(|t| usize_of(line, t))
            .collect::<Result<Vec<_>>>()?;
        let (line, act) = keyed(next("activation")?, "activation")?;
        if act.trim() != ACTIVATION {
            return Err(bad(line, &format!("unsupported activation {act:?}")));
        }
        let (line, td) = keyed(next("time_dim")?, "time_dim")?;
        let time_dim = usize_of(line, &td)?;
        let (line, ts) = keyed(next("total_steps")?, "total_steps")?;
        let total_steps = usize_of(line, &ts)?;
        let (line, br) = keyed(next("beta_range")?, "beta_range")?;
        let br = floats(line, &br)?;
        if br.len() != 2 {
            return Err(bad(line, "beta_range needs two values"));
        }
        let (line, opt) = keyed(next("optimizer")?, "optimizer")?;
        let mut parts = opt.split_whitespace();
        if parts.next() != Some("adam") {
            return Err(bad(line, "unsupported optimizer"));
        }
        let mut optimizer = AdamConfig::default();
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(line, "expected key=value"))?;
            let v: f64 = v.parse().map_err(|_| bad(line, &format!("bad number {v:?}")))?;
            match k {
                "lr" => optimizer.lr = v,
                "beta1" => optimizer.beta1 = v,
                "beta2" => optimizer.beta2 = v,
                "eps" => optimizer.eps = v,
                _ => return Err(bad(line, &format!("unknown optimizer key {k:?}"))),
            }
        }

        let mut layers = Vec::new();
        for (k, w) in layer_dims.windows(2).enumerate() {
            let (line, head) = keyed(next("weight")?, "weight")?;
            if head.split_whitespace().map(|t| usize_of(line, t)).collect::<Result<Vec<_>>>()?
                != [k, w[0], w[1]]
            {
                return Err(bad(line, "weight header does not match layer_dims"));
            }
            let mut flat = Vec::with_capacity(w[0] * w[1]);
            for _ in 0..w[0] {
                let (line, row) = next("weight row")?;
                let vals = floats(line, row)?;
                if vals.len() != w[1] {
                    return Err(bad(line, "wrong number of weights"));
                }
                flat.extend(vals);
            }
            let (line, head) = keyed(next("bias")?, "bias")?;
            if head.split_whitespace().map(|t| usize_of(line, t)).collect::<Result<Vec<_>>>()?
                != [k, w[1]]
            {
                return Err(bad(line, "bias header does not match layer_dims"));
            }
            let (line, row) = next("bias row")?;
            let bias = floats(line, row)?;
            if bias.len() != w[1] {
                return Err(bad(line, "wrong number of biases"));
            }
            layers.push(Dense {
                weight: Array2::from_shape_vec((w[0], w[1]), flat).expect("checked length"),
                bias: Array1::from(bias),
            });
        }
        if let Some((line, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(bad(line, &format!("trailing content {extra:?}")));
        }
        Ok(Self {
            model: DenoiserModel::from_layers(layers, time_dim, total_steps)?,
            optimizer,
            beta_range: (br[0], br[1]),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
