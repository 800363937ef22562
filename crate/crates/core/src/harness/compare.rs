//! Modes × seeds comparisons with median curves and steps-to-threshold.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::assign::{median, AssignMode};
use crate::harness::config::TrainConfig;
use crate::harness::train::{train_partial, write_run, RunOutput};
use crate::harness::{fmt_f64, QUALITY_METRIC_NOTE};
use crate::{Error, Result};

/// Fraction of training at which the reference arm's median SWD becomes
/// the threshold.
pub const THRESHOLD_FRACTION: f64 = 0.6;
/// Fraction of training reported as the early stage.
pub const EARLY_FRACTION: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub mode: AssignMode,
    pub seed: u64,
    /// Error message if the run could not start or failed outright.
    pub outcome: std::result::Result<RunOutput, String>,
}

impl RunRecord {
    pub fn status(&self) -> &'static str {
        match &self.outcome {
            Ok(out) if out.failure.is_some() => "diverged",
            Ok(_) => "ok",
            Err(_) => "error",
        }
    }

    fn completed(&self) -> Option<&RunOutput> {
        match &self.outcome {
            Ok(out) if out.failure.is_none() => Some(out),
            _ => None,
        }
    }

    pub fn dir_name(&self) -> String {
        format!("{}_seed{}", self.mode, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeSummary {
    pub mode: AssignMode,
    pub runs_ok: usize,
    /// Median SWD over completed runs at [`CompareReport::early_step`].
    pub early_swd: Option<f64>,
    pub final_swd: Option<f64>,
    /// First eval step where the median curve is at or below the threshold.
    pub steps_to_threshold: Option<usize>,
    /// Reference steps-to-threshold divided by this mode's.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub modes: Vec<AssignMode>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
    pub eval_steps: Vec<usize>,
    /// `curves[m][k]`: median SWD of mode `m` at `eval_steps[k]`.
    pub curves: Vec<Vec<Option<f64>>>,
    pub reference: AssignMode,
    pub threshold: Option<f64>,
    pub threshold_step: usize,
    pub early_step: usize,
    pub summaries: Vec<ModeSummary>,
}

/// First eval step at or beyond `fraction` of training.
fn step_at(eval_steps: &[usize], total: usize, fraction: f64) -> usize {
    let target = (fraction * total as f64).ceil() as usize;
    eval_steps
        .iter()
        .copied()
        .find(|&s| s >= target)
        .unwrap_or(total)
}

/// Trains every `(mode, seed)` pair on a pool of `jobs` workers and
/// summarizes. Individual run failures are recorded, not propagated.
pub fn compare_modes(
    config: &TrainConfig,
    modes: &[AssignMode],
    seeds: &[u64],
    jobs: usize,
) -> Result<CompareReport> {
    if modes.len() < 2 {
        return Err(Error::arg("compare needs at least two modes"));
    }
    if seeds.len() < 3 {
        return Err(Error::arg("compare needs at least three seeds"));
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::arg(e.to_string()))?;
    let jobs: Vec<(AssignMode, u64)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let runs: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mode, seed)| {
                let cfg = TrainConfig {
                    mode,
                    seed,
                    ..config.clone()
                };
                RunRecord {
                    mode,
                    seed,
                    outcome: train_partial(&cfg).map_err(|e| e.to_string()),
                }
            })
            .collect()
    });
    Ok(summarize(config, modes, seeds, runs))
}

fn summarize(
    config: &TrainConfig,
    modes: &[AssignMode],
    seeds: &[u64],
    runs: Vec<RunRecord>,
) -> CompareReport {
    let eval_steps: Vec<usize> = (1..=config.total_steps / config.eval_every)
        .map(|k| k * config.eval_every)
        .collect();
    let curves: Vec<Vec<Option<f64>>> = modes
        .iter()
        .map(|&mode| {
            let done: Vec<&RunOutput> = runs
                .iter()
                .filter(|r| r.mode == mode)
                .filter_map(RunRecord::completed)
                .collect();
            (0..eval_steps.len())
                .map(|k| {
                    let mut v: Vec<f64> = done.iter().map(|o| o.records[k].swd).collect();
                    (!v.is_empty()).then(|| median(&mut v))
                })
                .collect()
        })
        .collect();

    let reference = if modes.contains(&AssignMode::Vanilla) {
        AssignMode::Vanilla
    } else {
        modes[0]
    };
    let ref_idx = modes.iter().position(|&m| m == reference).unwrap_or(0);
    let threshold_step = step_at(&eval_steps, config.total_steps, THRESHOLD_FRACTION);
    let early_step = step_at(&eval_steps, config.total_steps, EARLY_FRACTION);
    let index_of = |step: usize| eval_steps.iter().position(|&s| s == step);
    let threshold = index_of(threshold_step).and_then(|k| curves[ref_idx][k]);

    let reach = |curve: &[Option<f64>]| -> Option<usize> {
        let t = threshold?;
        curve
            .iter()
            .zip(&eval_steps)
            .find(|(v, _)| v.is_some_and(|v| v <= t))
            .map(|(_, &s)| s)
    };
    let ref_steps = reach(&curves[ref_idx]);
    let summaries = modes
        .iter()
        .zip(&curves)
        .map(|(&mode, curve)| {
            let steps_to_threshold = reach(curve);
            ModeSummary {
                mode,
                runs_ok: runs
                    .iter()
                    .filter(|r| r.mode == mode && r.completed().is_some())
                    .count(),
                early_swd: index_of(early_step).and_then(|k| curve[k]),
                final_swd: curve.last().copied().flatten(),
                steps_to_threshold,
                speedup: match (ref_steps, steps_to_threshold) {
                    (Some(r), Some(s)) => Some(r as f64 / s as f64),
                    _ => None,
                },
            }
        })
        .collect();

    CompareReport {
        modes: modes.to_vec(),
        seeds: seeds.to_vec(),
        runs,
        eval_steps,
        curves,
        reference,
        threshold,
        threshold_step,
        early_step,
        summaries,
    }
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_else(|| "NA".into())
}

impl CompareReport {
    pub fn summary(&self, mode: AssignMode) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.mode == mode)
    }

    /// Median SWD vs step, one column per mode.
    pub fn curves_csv(&self) -> String {
        let mut s = format!("{QUALITY_METRIC_NOTE}\nstep");
        for m in &self.modes {
            let _ = write!(s, ",{m}");
        }
        s.push('\n');
        for (k, step) in self.eval_steps.iter().enumerate() {
            let _ = write!(s, "{step}");
            for curve in &self.curves {
                let _ = write!(s, ",{}", opt_f64(curve[k]));
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{QUALITY_METRIC_NOTE}\n");
        let _ = writeln!(
            s,
            "# threshold = {} ({} median swd at step {}); early stage = step {}",
            opt_f64(self.threshold),
            self.reference,
            self.threshold_step,
            self.early_step
        );
        s.push_str("mode,runs_ok,early_swd_median,final_swd_median,steps_to_threshold,speedup\n");
        for m in &self.summaries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                m.mode,
                m.runs_ok,
                opt_f64(m.early_swd),
                opt_f64(m.final_swd),
                m.steps_to_threshold
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "NA".into()),
                opt_f64(m.speedup)
            );
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("mode,seed,status,final_swd,lap_calls,message\n");
        for r in &self.runs {
            let (swd, calls, msg) = match &r.outcome {
                Ok(o) => (
                    opt_f64(o.final_swd()),
                    o.lap_calls.to_string(),
                    o.failure
                        .map(|(step, _)| format!("diverged at step {step}"))
                        .unwrap_or_default(),
                ),
                Err(e) => ("NA".into(), "NA".into(), e.replace(',', ";")),
            };
            let _ = writeln!(s, "{},{},{},{swd},{calls},{msg}", r.mode, r.seed, r.status());
        }
        s
    }

    /// Writes `curves.csv`, `summary.csv`, `runs.csv` and one directory per
    /// run that produced output.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("curves.csv", self.curves_csv()),
            ("summary.csv", self.summary_csv()),
            ("runs.csv", self.runs_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        for r in &self.runs {
            if let Ok(out) = &r.outcome {
                write_run(&dir.join(r.dir_name()), out)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            hidden_width: 16,
            hidden_layers: 2,
            time_dim: 4,
            diffusion_steps: 20,
            beta_start: 1e-3,
            beta_end: 0.3,
            total_steps: 30,
            eval_every: 10,
            eval_samples: 64,
            swd_projections: 8,
            sampler_steps: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn needs_enough_modes_and_seeds() {
        let cfg = tiny();
        assert!(compare_modes(&cfg, &[AssignMode::Vanilla], &[1, 2, 3], 1).is_err());
        assert!(compare_modes(&cfg, &AssignMode::ALL, &[1, 2], 1).is_err());
    }

    #[test]
    fn report_is_independent_of_worker_count() {
        let cfg = tiny();
        let modes = [AssignMode::Vanilla, AssignMode::ImmiscibleL2];
        let a = compare_modes(&cfg, &modes, &[1, 2, 3], 1).unwrap();
        let b = compare_modes(&cfg, &modes, &[1, 2, 3], 3).unwrap();
        assert_eq!(a.curves_csv(), b.curves_csv());
        assert_eq!(a.summary_csv(), b.summary_csv());
        assert_eq!(a.eval_steps, vec![10, 20, 30]);
        assert_eq!(a.threshold_step, 20);
        assert_eq!(a.early_step, 10);
        let v = a.summary(AssignMode::Vanilla).unwrap();
        assert_eq!(v.runs_ok, 3);
        assert!(v.steps_to_threshold.unwrap() <= 20);
        assert!(a.curves_csv().starts_with("# quality metric"));
        for r in &a.runs {
            let calls = r.outcome.as_ref().unwrap().lap_calls;
            assert_eq!(calls == 0, r.mode == AssignMode::Vanilla);
        }
    }

    #[test]
    fn failed_runs_are_recorded() {
        let cfg = TrainConfig {
            optimizer: crate::denoiser::AdamConfig {
                lr: 1e300,
                ..Default::default()
            },
            ..tiny()
        };
        let r = compare_modes(&cfg, &[AssignMode::Vanilla, AssignMode::ImmiscibleL1], &[1, 2, 3], 2)
            .unwrap();
        assert!(r.runs.iter().all(|r| r.status() == "diverged"));
        assert!(r.summaries.iter().all(|s| s.final_swd.is_none() && s.runs_ok == 0));
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let runs = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
        assert_eq!(runs.matches("diverged").count(), 12);
    }
}
