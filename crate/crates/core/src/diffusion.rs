//! Forward diffusion, linear schedules and deterministic DDIM sampling.
//!
//! Steps are 1-based: `t ∈ 1..=T`, with `ᾱ_0 = 1` standing for clean data so
//! the final sampler update can target `t_prev = 0`.

use ndarray::{Array1, Array2, Zip};

use crate::data::sample_noise_with;
use crate::rng::{derived_rng, stream};
use crate::{Batch, Error, NoiseBatch, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::arg("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::arg(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `ᾱ_1 … ᾱ_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::arg(format!("step {t} outside 0..={}", self.steps()))),
        }
    }

    pub fn final_alpha_bar(&self) -> f64 {
        *self.alpha_bars.last().expect("non-empty")
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::arg(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// Betas interpolated linearly from `beta_start` to `beta_end` over `T` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::arg("T must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::arg(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps)
            .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
            .collect()
    };
    DiffusionSchedule::from_betas(betas)
}

/// Beta range `[1e-4, 0.02]` rescaled by `1000 / T`, which keeps `ᾱ_T` near
/// zero for short schedules. The end point is capped at 0.999.
pub fn default_beta_range(steps: usize) -> (f64, f64) {
    let s = 1000.0 / steps.max(1) as f64;
    let end = (0.02 * s).min(0.999);
    ((1e-4 * s).min(end), end)
}

pub fn default_schedule(steps: usize) -> Result<DiffusionSchedule> {
    let (lo, hi) = default_beta_range(steps);
    make_schedule(steps, lo, hi)
}

/// Inference steps `τ_1 < … < τ_S = T`, evenly spaced over `1..=T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    step_indices: Vec<usize>,
}

impl SamplerConfig {
    pub fn linear(sampler_steps: usize, total_steps: usize) -> Result<Self> {
        if sampler_steps == 0 || sampler_steps > total_steps {
            return Err(Error::arg(format!(
                "sampler steps {sampler_steps} outside 1..={total_steps}"
            )));
        }
        let step_indices = (1..=sampler_steps)
            .map(|k| k * total_steps / sampler_steps)
            .collect();
        Ok(Self { step_indices })
    }

    pub fn steps(&self) -> usize {
        self.step_indices.len()
    }

    pub fn step_indices(&self) -> &[usize] {
        &self.step_indices
    }
}

fn check_pair(x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::dim(format!("{:?} vs {:?}", x.dim(), y.dim())));
    }
    Ok(())
}

/// `√ᾱ·x0 + √(1−ᾱ)·ε` for an explicit `ᾱ ∈ [0, 1]`.
pub fn diffuse_with_alpha_bar(x0: &Batch, eps: &NoiseBatch, alpha_bar: f64) -> Result<Batch> {
    check_pair(x0.points(), eps.points())?;
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::arg(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Batch::new(Zip::from(x0.points()).and(eps.points()).map_collect(|&x, &e| s * x + n * e))
}

pub fn forward_diffuse(
    x0: &Batch,
    eps: &NoiseBatch,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Batch> {
    sched.check_step(t)?;
    diffuse_with_alpha_bar(x0, eps, sched.alpha_bar(t)?)
}

/// Forward diffusion with a separate step per row.
pub fn forward_diffuse_rows(
    x0: &Batch,
    eps: &NoiseBatch,
    steps: &[usize],
    sched: &DiffusionSchedule,
) -> Result<Batch> {
    check_pair(x0.points(), eps.points())?;
    if steps.len() != x0.n() {
        return Err(Error::dim(format!("{} steps for {} rows", steps.len(), x0.n())));
    }
    let mut out = x0.points().clone();
    for (i, (mut row, &t)) in out.rows_mut().into_iter().zip(steps).enumerate() {
        sched.check_step(t)?;
        let ab = sched.alpha_bar(t)?;
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        row.zip_mut_with(&eps.row(i), |x, &e| *x = s * *x + n * e);
    }
    Batch::new(out)
}

/// Deterministic DDIM update from step `t` to `t_prev < t`.
pub fn ddim_step(
    x_t: &Batch,
    eps_hat: &Batch,
    t: usize,
    t_prev: usize,
    sched: &DiffusionSchedule,
) -> Result<Batch> {
    check_pair(x_t.points(), eps_hat.points())?;
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::arg(format!("t_prev {t_prev} is not below t {t}")));
    }
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let out = Zip::from(x_t.points()).and(eps_hat.points()).map_collect(|&x, &e| {
        let x0 = (x - sn * e) / sa;
        if t_prev == 0 {
            x0
        } else {
            pa * x0 + pn * e
        }
    });
    Batch::new(out)
}

/// A noise predictor `ε̂(x_t, t)`.
pub trait NoisePredictor {
    /// Data dimension it operates on.
    fn dim(&self) -> usize;
    fn predict(&self, x_t: &Batch, steps: &[usize]) -> Result<Batch>;
}

/// Runs the deterministic sampler from `n` standard-normal points.
///
/// Chain `i` draws its start point from a generator seeded by
/// `(seed, i)`, so the output for a chain does not depend on `n`.
pub fn sample(
    model: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<Batch> {
    let d = model.dim();
    if cfg.step_indices().last() != Some(&sched.steps()) {
        return Err(Error::arg(format!(
            "sampler ends at step {:?}, schedule has {}",
            cfg.step_indices().last(),
            sched.steps()
        )));
    }
    if n == 0 {
        return Err(Error::arg("sample count must be at least 1"));
    }
    let mut start = Array2::zeros((n, d));
    for (i, mut row) in start.rows_mut().into_iter().enumerate() {
        let mut rng = derived_rng(seed, stream::CHAIN, i as u64);
        row.assign(&sample_noise_with(1, d, &mut rng)?.points().row(0));
    }
    let x = Batch::new(start)?;
    sample_from(model, sched, cfg, x)
}

/// Deterministic sampling from a given start batch at `t = T`.
pub fn sample_from(
    model: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    start: Batch,
) -> Result<Batch> {
    if start.d() != model.dim() {
        return Err(Error::dim(format!(
            "model predicts {} dims, batch has {}",
            model.dim(),
            start.d()
        )));
    }
    let idx = cfg.step_indices();
    let mut x = start;
    for k in (0..idx.len()).rev() {
        let t = idx[k];
        let t_prev = if k == 0 { 0 } else { idx[k - 1] };
        let eps_hat = model.predict(&x, &vec![t; x.n()])?;
        x = ddim_step(&x, &eps_hat, t, t_prev, sched)?;
    }
    Ok(x)
}

/// Closed-form minimizer of the noise-prediction loss at a nearly pure-noise
/// step, where the posterior over data collapses to the data prior:
/// `ε̂ = a·x̄₀ + b·x_t` with `a = −√ᾱ/√(1−ᾱ)` and `b = 1/√(1−ᾱ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePrediction {
    pub a: f64,
    pub b: f64,
    pub x0_mean: Array1<f64>,
    pub eps: Array1<f64>,
}

pub fn data_mean(data: &Batch) -> Array1<f64> {
    data.points()
        .mean_axis(ndarray::Axis(0))
        .expect("batches are non-empty")
}

fn oracle_coefficients(alpha_bar: f64) -> Result<(f64, f64)> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::arg(format!("alpha_bar {alpha_bar} must lie in (0, 1)")));
    }
    let s = (1.0 - alpha_bar).sqrt();
    Ok((-alpha_bar.sqrt() / s, 1.0 / s))
}

pub fn oracle_noise_prediction_at(
    x_t: &[f64],
    data: &Batch,
    alpha_bar: f64,
) -> Result<OraclePrediction> {
    if x_t.len() != data.d() {
        return Err(Error::dim(format!("point has {} dims, data {}", x_t.len(), data.d())));
    }
    let (a, b) = oracle_coefficients(alpha_bar)?;
    let x0_mean = data_mean(data);
    let eps = Zip::from(&x0_mean)
        .and(&Array1::from(x_t.to_vec()))
        .map_collect(|&m, &x| a * m + b * x);
    Ok(OraclePrediction {
        a,
        b,
        x0_mean,
        eps,
    })
}

/// The oracle at `t = T`.
pub fn oracle_noise_prediction(
    x_t: &[f64],
    data: &Batch,
    sched: &DiffusionSchedule,
) -> Result<OraclePrediction> {
    oracle_noise_prediction_at(x_t, data, sched.final_alpha_bar())
}

/// The closed-form oracle used as a predictor at every step.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    mean: Array1<f64>,
    schedule: DiffusionSchedule,
}

impl OraclePredictor {
    pub fn new(data: &Batch, schedule: DiffusionSchedule) -> Self {
        Self {
            mean: data_mean(data),
            schedule,
        }
    }
}

impl NoisePredictor for OraclePredictor {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn predict(&self, x_t: &Batch, steps: &[usize]) -> Result<Batch> {
        let mut out = x_t.points().clone();
        for (mut row, &t) in out.rows_mut().into_iter().zip(steps) {
            let (a, b) = oracle_coefficients(self.schedule.alpha_bar(t)?)?;
            row.zip_mut_with(&self.mean, |x, &m| *x = a * m + b * *x);
        }
        Batch::new(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_noise;
    use proptest::prelude::*;

    fn b(rows: &[&[f64]]) -> Batch {
        Batch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn small_schedules() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bar(3).is_err());
    }

    #[test]
    fn unscaled_default_ranges() {
        assert!(make_schedule(100, 1e-4, 0.02).unwrap().final_alpha_bar() < 0.4);
        assert!(make_schedule(1000, 1e-4, 0.02).unwrap().final_alpha_bar() < 1e-2);
        for t in [10, 50, 100, 1000] {
            assert!(default_schedule(t).unwrap().final_alpha_bar() <= 0.01, "T={t}");
        }
    }

    #[test]
    fn schedule_errors() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(DiffusionSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn forward_limits_and_arithmetic() {
        let x0 = b(&[&[1.0, 1.0]]);
        let eps: NoiseBatch = b(&[&[0.0, -1.0]]).into();
        assert_eq!(diffuse_with_alpha_bar(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(
            diffuse_with_alpha_bar(&x0, &eps, 0.0).unwrap(),
            Batch::from(eps.clone())
        );
        let y = diffuse_with_alpha_bar(&x0, &eps, 0.25).unwrap();
        assert_eq!(y.row_slice(0)[0], 0.5);
        assert!((y.row_slice(0)[1] - (0.5 - 0.75f64.sqrt())).abs() < 1e-15);
        assert!((y.row_slice(0)[1] + 0.3660254037844386).abs() < 1e-15);

        let s = default_schedule(10).unwrap();
        assert!(forward_diffuse(&x0, &eps, 0, &s).is_err());
        assert!(forward_diffuse(&x0, &eps, 11, &s).is_err());
    }

    #[test]
    fn ddim_inverts_forward_at_every_step() {
        let s = default_schedule(100).unwrap();
        let x0: Batch = sample_noise(10, 3, 1).unwrap().into();
        let eps = sample_noise(10, 3, 2).unwrap();
        for t in 1..=100 {
            let xt = forward_diffuse(&x0, &eps, t, &s).unwrap();
            let back = ddim_step(&xt, &eps.clone().into(), t, 0, &s).unwrap();
            for (a, b) in back.as_slice().iter().zip(x0.as_slice()) {
                assert!((a - b).abs() <= 1e-6, "t={t}");
            }
        }
    }

    #[test]
    fn ddim_step_order_is_enforced() {
        let s = default_schedule(10).unwrap();
        let x = b(&[&[0.0]]);
        assert!(ddim_step(&x, &x, 5, 5, &s).is_err());
        assert!(ddim_step(&x, &x, 5, 6, &s).is_err());
        assert!(ddim_step(&x, &x, 11, 0, &s).is_err());
    }

    #[test]
    fn linear_sampler_indices() {
        assert_eq!(
            SamplerConfig::linear(5, 100).unwrap().step_indices(),
            &[20, 40, 60, 80, 100]
        );
        let c = SamplerConfig::linear(3, 10).unwrap();
        assert_eq!(c.step_indices(), &[3, 6, 10]);
        assert_eq!(SamplerConfig::linear(1, 7).unwrap().step_indices(), &[7]);
        assert_eq!(
            SamplerConfig::linear(7, 7).unwrap().step_indices(),
            &[1, 2, 3, 4, 5, 6, 7]
        );
        assert!(SamplerConfig::linear(0, 7).is_err());
        assert!(SamplerConfig::linear(8, 7).is_err());
    }

    #[test]
    fn oracle_coefficients_at_half() {
        let data = b(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        let p = oracle_noise_prediction_at(&[0.3, 0.4], &data, 0.5).unwrap();
        assert!((p.a + 1.0).abs() < 1e-15);
        assert!((p.b - 2f64.sqrt()).abs() < 1e-15);
        // symmetric data: a * 0 vanishes
        assert_eq!(p.eps[0], p.b * 0.3);
        assert_eq!(p.eps[1], p.b * 0.4);
        assert!(oracle_noise_prediction_at(&[0.0, 0.0], &data, 1.0).is_err());
        assert!(oracle_noise_prediction_at(&[0.0, 0.0], &data, 0.0).is_err());
        assert!(oracle_noise_prediction_at(&[0.0], &data, 0.5).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_single_step_works() {
        let data = b(&[&[1.0, 2.0], &[3.0, -2.0]]);
        let s = default_schedule(20).unwrap();
        let oracle = OraclePredictor::new(&data, s.clone());
        let cfg = SamplerConfig::linear(4, 20).unwrap();
        let a = sample(&oracle, &s, &cfg, 16, 9).unwrap();
        let b2 = sample(&oracle, &s, &cfg, 16, 9).unwrap();
        assert_eq!(a, b2);
        // chain i does not depend on how many chains run
        let small = sample(&oracle, &s, &cfg, 4, 9).unwrap();
        assert_eq!(small.row(3), a.row(3));

        let one = SamplerConfig::linear(1, 20).unwrap();
        let out = sample(&oracle, &s, &one, 8, 1).unwrap();
        // One step with the oracle lands on the data mean exactly (up to rounding).
        for row in out.points().rows() {
            assert!((row[0] - 2.0).abs() < 1e-9 && row[1].abs() < 1e-9);
        }
        assert!(sample(&oracle, &s, &SamplerConfig::linear(4, 10).unwrap(), 2, 0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(steps in 1usize..400, lo in 1e-5f64..0.05, extra in 0.0f64..0.5) {
            let hi = (lo + extra).min(0.99);
            let s = make_schedule(steps, lo, hi).unwrap();
            let mut prod = 1.0;
            let mut prev = 1.0;
            for (t, (&a, &ab)) in s.alphas().iter().zip(s.alpha_bars()).enumerate() {
                prop_assert!(s.betas()[t] > 0.0 && s.betas()[t] < 1.0);
                prod *= a;
                prop_assert!((ab - prod).abs() <= 1e-10 * prod);
                prop_assert!(ab < prev);
                prev = ab;
            }
        }

        #[test]
        fn ddim_composes_with_forward(seed in any::<u64>(), t in 2usize..=50, frac in 0.0f64..1.0) {
            let s = default_schedule(50).unwrap();
            let t_prev = ((t - 1) as f64 * frac) as usize;
            let x0: Batch = sample_noise(4, 3, seed).unwrap().into();
            let eps = sample_noise(4, 3, seed.wrapping_add(1)).unwrap();
            let xt = forward_diffuse(&x0, &eps, t, &s).unwrap();
            let stepped = ddim_step(&xt, &eps.clone().into(), t, t_prev, &s).unwrap();
            let expected = if t_prev == 0 {
                x0.clone()
            } else {
                forward_diffuse(&x0, &eps, t_prev, &s).unwrap()
            };
            for (a, b) in stepped.as_slice().iter().zip(expected.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }
}
