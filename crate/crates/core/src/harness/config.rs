//! Training configuration as flat `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. [`TrainConfig::to_text`] writes every key, and its output parses
//! back to the same configuration.

use std::path::{Path, PathBuf};

use crate::assign::{AssignMode, FlipKind};
use crate::data::{ToyDataset, ToyKind};
use crate::denoiser::AdamConfig;
use crate::diffusion::{default_beta_range, make_schedule, DiffusionSchedule, SamplerConfig};
use crate::harness::fmt_f64;
use crate::{Error, Metric, Result};

/// Recognized keys with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    ("dataset", "toy distribution: gauss8, checkerboard, swissroll, twomoons"),
    ("dataset_scale", "support size of the toy distribution"),
    ("dataset_spread", "std of the Gaussian jitter around the toy support"),
    ("batch_size", "training batch size (>= 2 for immiscible modes)"),
    ("mode", "vanilla, immiscible_l2, immiscible_l1, immiscible_flipped"),
    ("flip", "noise transform for immiscible_flipped: negate, reverse"),
    ("metric", "assignment distance: l2, l2sq (l1 is implied by immiscible_l1)"),
    ("quantize", "round assignment inputs to binary16: on, off"),
    ("diffusion_steps", "T, number of diffusion steps"),
    ("beta_start", "first beta of the linear schedule"),
    ("beta_end", "last beta of the linear schedule"),
    ("hidden_width", "width of each hidden layer"),
    ("hidden_layers", "number of hidden layers"),
    ("time_dim", "sinusoidal time-embedding width (even)"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam epsilon"),
    ("total_steps", "number of optimizer steps"),
    ("eval_every", "evaluation interval in steps (must divide total_steps)"),
    ("eval_samples", "generated and target samples per evaluation"),
    ("swd_projections", "random directions for the sliced Wasserstein distance"),
    ("sampler_steps", "S, deterministic sampler steps (<= T)"),
    ("seed", "master seed for data, noise, timesteps and initialization"),
    ("eval_seed", "seed for evaluation sampling and targets"),
    ("record_wall_time", "write measured step times into metrics.csv: on, off"),
    ("out_dir", "output directory for a single run"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: ToyDataset,
    pub batch_size: usize,
    pub mode: AssignMode,
    pub flip: FlipKind,
    pub metric: Metric,
    pub quantize: bool,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub time_dim: usize,
    pub optimizer: AdamConfig,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub swd_projections: usize,
    pub sampler_steps: usize,
    pub seed: u64,
    pub eval_seed: u64,
    pub record_wall_time: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let (beta_start, beta_end) = default_beta_range(100);
        Self {
            dataset: ToyDataset::new(ToyKind::Gauss8),
            batch_size: 256,
            mode: AssignMode::ImmiscibleL2,
            flip: FlipKind::Negate,
            metric: Metric::L2,
            quantize: false,
            diffusion_steps: 100,
            beta_start,
            beta_end,
            hidden_width: 128,
            hidden_layers: 3,
            time_dim: 16,
            optimizer: AdamConfig::default(),
            total_steps: 3000,
            eval_every: 100,
            eval_samples: 2048,
            swd_projections: 128,
            sampler_steps: 20,
            seed: 0,
            eval_seed: 1,
            record_wall_time: false,
            out_dir: None,
        }
    }
}

fn on_off(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" | "yes" => Some(true),
        "off" | "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn show_on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl TrainConfig {
    /// Sets one key. `line` is only used for error messages.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let err = |message: String| Error::Config { line, message };
        macro_rules! num {
            () => {
                value
                    .parse()
                    .map_err(|_| err(format!("{key}: cannot parse {value:?}")))?
            };
        }
        match key {
            "dataset" => self.dataset.kind = value.parse().map_err(|e: Error| err(e.to_string()))?,
            "dataset_scale" => self.dataset.scale = num!(),
            "dataset_spread" => self.dataset.spread = num!(),
            "batch_size" => self.batch_size = num!(),
            "mode" => self.mode = value.parse().map_err(|e: Error| err(e.to_string()))?,
            "flip" => self.flip = value.parse().map_err(|e: Error| err(e.to_string()))?,
            "metric" => self.metric = value.parse().map_err(|e: Error| err(e.to_string()))?,
            "quantize" => {
                self.quantize = on_off(value).ok_or_else(|| err(format!("quantize: {value:?}")))?
            }
            "diffusion_steps" => self.diffusion_steps = num!(),
            "beta_start" => self.beta_start = num!(),
            "beta_end" => self.beta_end = num!(),
            "hidden_width" => self.hidden_width = num!(),
            "hidden_layers" => self.hidden_layers = num!(),
            "time_dim" => self.time_dim = num!(),
            "lr" => self.optimizer.lr = num!(),
            "beta1" => self.optimizer.beta1 = num!(),
            "beta2" => self.optimizer.beta2 = num!(),
            "adam_eps" => self.optimizer.eps = num!(),
            "total_steps" => self.total_steps = num!(),
            "eval_every" => self.eval_every = num!(),
            "eval_samples" => self.eval_samples = num!(),
            "swd_projections" => self.swd_projections = num!(),
            "sampler_steps" => self.sampler_steps = num!(),
            "seed" => self.seed = num!(),
            "eval_seed" => self.eval_seed = num!(),
            "record_wall_time" => {
                self.record_wall_time =
                    on_off(value).ok_or_else(|| err(format!("record_wall_time: {value:?}")))?
            }
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(err(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected key = value, got {trimmed:?}"),
            })?;
            cfg.set(key.trim(), value.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Config { line: 0, message };
        if self.batch_size == 0 {
            return Err(err("batch_size must be positive".into()));
        }
        if self.mode.uses_assignment() && self.batch_size < 2 {
            return Err(err(format!("{} needs batch_size >= 2", self.mode)));
        }
        if self.mode == AssignMode::ImmiscibleL2 && self.metric == Metric::L1 {
            return Err(err("immiscible_l2 with metric l1; use mode immiscible_l1".into()));
        }
        if self.total_steps == 0 || self.eval_every == 0 || self.total_steps % self.eval_every != 0
        {
            return Err(err(format!(
                "eval_every {} must divide total_steps {}",
                self.eval_every, self.total_steps
            )));
        }
        if self.sampler_steps == 0 || self.sampler_steps > self.diffusion_steps {
            return Err(err(format!(
                "sampler_steps {} outside 1..={}",
                self.sampler_steps, self.diffusion_steps
            )));
        }
        if self.hidden_width == 0 || self.eval_samples == 0 || self.swd_projections == 0 {
            return Err(err("hidden_width, eval_samples and swd_projections must be positive".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(err(format!("time_dim {} is odd", self.time_dim)));
        }
        if !(self.dataset.scale.is_finite() && self.dataset.scale > 0.0)
            || !(self.dataset.spread.is_finite() && self.dataset.spread >= 0.0)
        {
            return Err(err("dataset_scale must be positive and dataset_spread nonnegative".into()));
        }
        self.optimizer.validate().map_err(|e| err(e.to_string()))?;
        self.schedule().map_err(|e| err(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        SamplerConfig::linear(self.sampler_steps, self.diffusion_steps)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![2 + self.time_dim];
        dims.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        dims.push(2);
        dims
    }

    /// Every key, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let o = &self.optimizer;
        let values: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.kind.to_string()),
            ("dataset_scale", fmt_f64(self.dataset.scale)),
            ("dataset_spread", fmt_f64(self.dataset.spread)),
            ("batch_size", self.batch_size.to_string()),
            ("mode", self.mode.to_string()),
            ("flip", self.flip.to_string()),
            ("metric", self.metric.to_string()),
            ("quantize", show_on_off(self.quantize).into()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("beta_start", fmt_f64(self.beta_start)),
            ("beta_end", fmt_f64(self.beta_end)),
            ("hidden_width", self.hidden_width.to_string()),
            ("hidden_layers", self.hidden_layers.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("lr", fmt_f64(o.lr)),
            ("beta1", fmt_f64(o.beta1)),
            ("beta2", fmt_f64(o.beta2)),
            ("adam_eps", fmt_f64(o.eps)),
            ("total_steps", self.total_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("swd_projections", self.swd_projections.to_string()),
            ("sampler_steps", self.sampler_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("record_wall_time", show_on_off(self.record_wall_time).into()),
        ];
        let mut out: String = values
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        if let Some(dir) = &self.out_dir {
            out.push_str(&format!("out_dir = {}\n", dir.display()));
        }
        out
    }
}
