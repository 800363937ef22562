//! One training run: batches, assignment, loss, Adam, periodic evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::assign::{apply_mode_with, AssignStats};
use crate::data::{sample_noise_with, sample_toy};
use crate::denoiser::{loss_and_grads, optimizer_step, Checkpoint, DenoiserModel, OptimizerState};
use crate::diffusion::{sample, DiffusionSchedule};
use crate::harness::config::TrainConfig;
use crate::harness::swd::sliced_wasserstein;
use crate::harness::{fmt_f64, QUALITY_METRIC_NOTE};
use crate::lap::solve_calls;
use crate::rng::{derive_seed, derived_rng, stream};
use crate::{Batch, Error, NoiseBatch, Result};

/// Everything one optimizer step consumes.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub data: Batch,
    /// Noise as drawn, before any reordering.
    pub raw_noise: NoiseBatch,
    /// Noise paired with `data` row by row.
    pub noise: NoiseBatch,
    pub steps: Vec<usize>,
    pub stats: AssignStats,
}

/// Data, noise and timestep draws for step `k` come from their own derived
/// streams, so the mode only changes which noise row meets which data row.
pub fn step_batch(cfg: &TrainConfig, k: usize) -> Result<StepBatch> {
    let data = sample_toy(&cfg.dataset, cfg.batch_size, derive_seed(cfg.seed, stream::DATA, k as u64))?;
    let mut noise_rng = derived_rng(cfg.seed, stream::NOISE, k as u64);
    let raw_noise = sample_noise_with(cfg.batch_size, data.d(), &mut noise_rng)?;
    let mut t_rng = derived_rng(cfg.seed, stream::TIMESTEP, k as u64);
    let steps = (0..cfg.batch_size)
        .map(|_| t_rng.gen_range(1..=cfg.diffusion_steps))
        .collect();
    let assigned = apply_mode_with(cfg.mode, &data, &raw_noise, cfg.metric, cfg.quantize, cfg.flip)?;
    Ok(StepBatch {
        data,
        raw_noise,
        noise: assigned.noise,
        steps,
        stats: assigned.stats,
    })
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub swd: f64,
    /// Mean relative assignment reduction since the previous record.
    pub reduction: f64,
    /// Mean step time since the previous record; 0 unless wall time is recorded.
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,loss,swd,reduction,wall_ms";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step,
            fmt_f64(self.loss),
            fmt_f64(self.swd),
            fmt_f64(self.reduction),
            fmt_f64(self.wall_ms)
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: TrainConfig,
    pub records: Vec<MetricsRecord>,
    /// Training loss at every completed step.
    pub losses: Vec<f64>,
    /// Model after the last completed step.
    pub checkpoint: Checkpoint,
    /// Solver invocations made by this run.
    pub lap_calls: u64,
    /// Measured milliseconds per completed step: (total, assignment).
    pub step_times: Vec<(f64, f64)>,
    /// Set when training stopped early on a non-finite value.
    pub failure: Option<(usize, f64)>,
}

impl RunOutput {
    pub fn final_swd(&self) -> Option<f64> {
        self.records.last().map(|r| r.swd)
    }
}

/// SWD between `eval_samples` generated points and as many fresh target
/// points. Uses only the evaluation seed.
pub fn evaluate(
    model: &DenoiserModel,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let k = step as u64;
    let generated = sample(
        model,
        sched,
        &cfg.sampler()?,
        cfg.eval_samples,
        derive_seed(cfg.eval_seed, stream::EVAL_SAMPLER, k),
    )?;
    let target = sample_toy(
        &cfg.dataset,
        cfg.eval_samples,
        derive_seed(cfg.eval_seed, stream::EVAL_TARGET, k),
    )?;
    sliced_wasserstein(
        &generated,
        &target,
        cfg.swd_projections,
        derive_seed(cfg.eval_seed, stream::EVAL_PROJECTION, 0),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Runs training and keeps whatever was produced if a step diverges; see
/// [`RunOutput::failure`].
pub fn train_partial(cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let mut model = DenoiserModel::new(&cfg.layer_dims(), cfg.time_dim, cfg.diffusion_steps, cfg.seed)?;
    let mut opt = OptimizerState::new(&model, cfg.optimizer)?;
    let calls_before = solve_calls();

    let mut records = Vec::new();
    let mut losses = Vec::with_capacity(cfg.total_steps);
    let mut step_times = Vec::with_capacity(cfg.total_steps);
    let mut reductions = Vec::with_capacity(cfg.total_steps);
    let mut failure = None;

    for k in 1..=cfg.total_steps {
        let start = Instant::now();
        let batch = step_batch(cfg, k)?;
        let assign_ms = batch.stats.wall_time.as_secs_f64() * 1e3;
        let stepped = loss_and_grads(&model, &batch.data, &batch.noise, &batch.steps, &sched)
            .and_then(|(loss, grads)| optimizer_step(&mut model, &grads, &mut opt).map(|_| loss));
        let loss = match stepped {
            Ok(loss) => loss,
            Err(Error::Numeric(_)) => {
                failure = Some((k, f64::NAN));
                break;
            }
            Err(e) => return Err(e),
        };
        losses.push(loss);
        reductions.push(batch.stats.reduction);
        step_times.push((start.elapsed().as_secs_f64() * 1e3, assign_ms));

        if k % cfg.eval_every == 0 {
            let swd = evaluate(&model, &sched, cfg, k)?;
            let from = k - cfg.eval_every;
            let wall_ms = if cfg.record_wall_time {
                mean(&step_times[from..].iter().map(|t| t.0).collect::<Vec<_>>())
            } else {
                0.0
            };
            records.push(MetricsRecord {
                step: k,
                loss: mean(&losses[from..]),
                swd,
                reduction: mean(&reductions[from..]),
                wall_ms,
            });
        }
    }

    Ok(RunOutput {
        config: cfg.clone(),
        records,
        losses,
        checkpoint: Checkpoint {
            model,
            optimizer: cfg.optimizer,
            beta_range: (cfg.beta_start, cfg.beta_end),
        },
        lap_calls: solve_calls() - calls_before,
        step_times,
        failure,
    })
}

/// Trains one model. A non-finite loss or parameter aborts with
/// [`Error::Diverged`].
pub fn train_one(cfg: &TrainConfig) -> Result<RunOutput> {
    let out = train_partial(cfg)?;
    match out.failure {
        Some((step, loss)) => Err(Error::Diverged { step, loss }),
        None => Ok(out),
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Per-interval measured timings. Not reproducible by nature, so it lives
/// outside `metrics.csv`.
pub fn timing_csv(out: &RunOutput) -> String {
    let mut s = String::from("step,step_ms_mean,assign_ms_mean\n");
    let every = out.config.eval_every;
    for r in &out.records {
        let span = &out.step_times[r.step - every..r.step];
        let total = span.iter().map(|t| t.0).sum::<f64>() / span.len() as f64;
        let assign = span.iter().map(|t| t.1).sum::<f64>() / span.len() as f64;
        let _ = writeln!(s, "{},{},{}", r.step, fmt_f64(total), fmt_f64(assign));
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `run.meta`, `checkpoint.txt` and `timing.csv`
/// into `dir`. A diverged run also gets `diagnostic.txt`.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("metrics.csv"), &metrics_csv(&out.records))?;
    let mut meta = format!("{QUALITY_METRIC_NOTE}\n");
    meta.push_str(&out.config.to_text());
    let status = match out.failure {
        Some(_) => "diverged",
        None => "ok",
    };
    let _ = writeln!(meta, "# status = {status}");
    write(&dir.join("run.meta"), &meta)?;
    out.checkpoint.save(dir.join("checkpoint.txt"))?;
    write(&dir.join("timing.csv"), &timing_csv(out))?;
    if let Some((step, loss)) = out.failure {
        let last = out.losses.last().copied().unwrap_or(f64::NAN);
        write(
            &dir.join("diagnostic.txt"),
            &format!(
                "diverged at step {step}: loss {loss}\nlast finite loss {}\ncompleted steps {}\n",
                fmt_f64(last),
                out.losses.len()
            ),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::AssignMode;

    fn tiny(mode: AssignMode) -> TrainConfig {
        TrainConfig {
            mode,
            batch_size: 16,
            hidden_width: 16,
            hidden_layers: 2,
            time_dim: 4,
            diffusion_steps: 20,
            beta_start: 1e-3,
            beta_end: 0.3,
            total_steps: 20,
            eval_every: 10,
            eval_samples: 64,
            swd_projections: 8,
            sampler_steps: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn modes_share_data_noise_and_steps() {
        let v = step_batch(&tiny(AssignMode::Vanilla), 3).unwrap();
        let i = step_batch(&tiny(AssignMode::ImmiscibleL2), 3).unwrap();
        assert_eq!(v.data, i.data);
        assert_eq!(v.raw_noise, i.raw_noise);
        assert_eq!(v.steps, i.steps);
        assert_eq!(v.noise, v.raw_noise);
        assert!(i.stats.reduction <= 0.0);
        assert!(v.steps.iter().all(|&t| (1..=20).contains(&t)));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny(AssignMode::ImmiscibleL2);
        let a = train_one(&cfg).unwrap();
        let b = train_one(&cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(metrics_csv(&a.records), metrics_csv(&b.records));
        assert_eq!(a.records.len(), 2);
        assert_eq!(a.lap_calls, 20);
        assert!(a.records.iter().all(|r| r.wall_ms == 0.0));
    }

    #[test]
    fn vanilla_never_solves() {
        let out = train_one(&tiny(AssignMode::Vanilla)).unwrap();
        assert_eq!(out.lap_calls, 0);
        assert!(out.records.iter().all(|r| r.reduction == 0.0));
    }

    #[test]
    fn evaluation_does_not_perturb_training() {
        let cfg = tiny(AssignMode::ImmiscibleFlipped);
        let sparse = train_one(&TrainConfig { eval_every: 20, ..cfg.clone() }).unwrap();
        let dense = train_one(&TrainConfig { eval_every: 5, eval_samples: 200, ..cfg }).unwrap();
        assert_eq!(sparse.losses, dense.losses);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            optimizer: crate::denoiser::AdamConfig {
                lr: 1e300,
                ..Default::default()
            },
            ..tiny(AssignMode::Vanilla)
        };
        match train_one(&cfg) {
            Err(Error::Diverged { step, .. }) => assert!(step >= 1),
            other => panic!("{:?}", other.map(|o| o.losses)),
        }
        let partial = train_partial(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &partial).unwrap();
        assert!(dir.path().join("diagnostic.txt").exists());
    }

    #[test]
    fn run_files_are_written() {
        let out = train_one(&tiny(AssignMode::ImmiscibleL1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &out).unwrap();
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("step,loss,swd,reduction,wall_ms\n10,"));
        let ck = Checkpoint::load(dir.path().join("checkpoint.txt")).unwrap();
        assert_eq!(ck, out.checkpoint);
        let meta = fs::read_to_string(dir.path().join("run.meta")).unwrap();
        assert!(meta.contains("mode = immiscible_l1"));
    }
}
