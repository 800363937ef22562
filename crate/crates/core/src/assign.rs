//! Assign-then-diffuse noise pairing.
//!
//! Before a batch is diffused, its noise rows are reordered by an optimal
//! assignment between data and noise so that every data point is diffused
//! towards nearby noise. The multiset of noise rows never changes, so the
//! batch-level noise distribution stays standard normal; only the pairing
//! does.
//!
//! The flipped variant matches data against negated noise but hands back the
//! original rows: the pairing is still one-to-one and localized, but it
//! maximizes rather than minimizes the data/noise distance.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::cost::{paired_costs, pairwise_cost_with, Precision};
use crate::lap::{solve_lap, Assignment};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::data::DataSource;
use crate::{Batch, Error, Metric, NoiseBatch, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AssignMode {
    Vanilla,
    ImmiscibleL2,
    ImmiscibleL1,
    ImmiscibleFlipped,
}

impl AssignMode {
    pub const ALL: [AssignMode; 4] = [
        AssignMode::Vanilla,
        AssignMode::ImmiscibleL2,
        AssignMode::ImmiscibleL1,
        AssignMode::ImmiscibleFlipped,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AssignMode::Vanilla => "vanilla",
            AssignMode::ImmiscibleL2 => "immiscible_l2",
            AssignMode::ImmiscibleL1 => "immiscible_l1",
            AssignMode::ImmiscibleFlipped => "immiscible_flipped",
        }
    }

    pub fn uses_assignment(self) -> bool {
        self != AssignMode::Vanilla
    }
}

impl fmt::Display for AssignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AssignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vanilla" => Ok(AssignMode::Vanilla),
            "immiscible_l2" | "immiscible" | "l2" => Ok(AssignMode::ImmiscibleL2),
            "immiscible_l1" | "l1" => Ok(AssignMode::ImmiscibleL1),
            "immiscible_flipped" | "flipped" => Ok(AssignMode::ImmiscibleFlipped),
            other => Err(Error::arg(format!("unknown assign mode {other:?}"))),
        }
    }
}

/// How the noise is transformed before it is matched in flipped mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlipKind {
    /// `n → −n` coordinate-wise.
    #[default]
    Negate,
    /// Coordinates in reverse order.
    ReverseOrder,
}

impl fmt::Display for FlipKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlipKind::Negate => "negate",
            FlipKind::ReverseOrder => "reverse",
        })
    }
}

impl FromStr for FlipKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "negate" | "sign" => Ok(FlipKind::Negate),
            "reverse" | "reverse_order" => Ok(FlipKind::ReverseOrder),
            other => Err(Error::arg(format!("unknown flip kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignStats {
    /// Mean pair cost of the identity pairing.
    pub pre_cost: f64,
    /// Mean pair cost after reordering.
    pub post_cost: f64,
    /// `(post − pre) / pre`.
    pub reduction: f64,
    /// Cost matrix plus solver time.
    pub wall_time: Duration,
}

#[derive(Debug, Clone)]
pub struct Assigned {
    /// Row `i` is the input noise row `assignment.perm[i]`.
    pub noise: NoiseBatch,
    pub assignment: Assignment,
    pub stats: AssignStats,
}

/// Options for a single assignment call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignOptions {
    pub metric: Metric,
    pub quantize: bool,
    /// Row shards for the cost matrix.
    pub shards: usize,
}

impl Default for AssignOptions {
    fn default() -> Self {
        Self {
            metric: Metric::L2,
            quantize: false,
            shards: 1,
        }
    }
}

fn check_inputs(data: &Batch, noise: &NoiseBatch) -> Result<()> {
    if data.n() != noise.n() || data.d() != noise.d() {
        return Err(Error::dim(format!(
            "data is {}x{}, noise is {}x{}",
            data.n(),
            data.d(),
            noise.n(),
            noise.d()
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn finish(
    data: &Batch,
    noise: &NoiseBatch,
    assignment: Assignment,
    metric: Metric,
    wall_time: Duration,
) -> Result<Assigned> {
    let identity: Vec<usize> = (0..data.n()).collect();
    let pre_cost = mean(&paired_costs(data, noise, &identity, metric)?);
    let post_cost = mean(&paired_costs(data, noise, &assignment.perm, metric)?);
    let reduction = if pre_cost > 0.0 {
        (post_cost - pre_cost) / pre_cost
    } else {
        0.0
    };
    Ok(Assigned {
        noise: noise.select_rows(&assignment.perm)?,
        assignment,
        stats: AssignStats {
            pre_cost,
            post_cost,
            reduction,
            wall_time,
        },
    })
}

fn match_against(
    data: &Batch,
    target: &NoiseBatch,
    options: AssignOptions,
) -> Result<(Assignment, Duration)> {
    let start = Instant::now();
    let cost = pairwise_cost_with(
        data,
        target,
        options.metric,
        Precision::from_flag(options.quantize),
        options.shards,
    )?;
    let assignment = solve_lap(&cost);
    Ok((assignment, start.elapsed()))
}

/// Reorders `noise` by the minimum-cost assignment to `data`.
///
/// With `quantize`, the assignment is computed on binary16-rounded inputs;
/// the returned rows and statistics use the original values.
pub fn assign_noise(
    data: &Batch,
    noise: &NoiseBatch,
    metric: Metric,
    quantize: bool,
) -> Result<Assigned> {
    assign_noise_with(
        data,
        noise,
        AssignOptions {
            metric,
            quantize,
            ..AssignOptions::default()
        },
    )
}

pub fn assign_noise_with(
    data: &Batch,
    noise: &NoiseBatch,
    options: AssignOptions,
) -> Result<Assigned> {
    check_inputs(data, noise)?;
    let (assignment, wall_time) = match_against(data, noise, options)?;
    finish(data, noise, assignment, options.metric, wall_time)
}

/// Flipped (non-OT) pairing with L2 costs and sign negation.
pub fn assign_noise_flipped(data: &Batch, noise: &NoiseBatch) -> Result<Assigned> {
    assign_noise_flipped_with(data, noise, AssignOptions::default(), FlipKind::Negate)
}

pub fn flip_noise(noise: &NoiseBatch, flip: FlipKind) -> Result<NoiseBatch> {
    match flip {
        FlipKind::Negate => noise.map(|x| -x),
        FlipKind::ReverseOrder => {
            let mut p = noise.points().clone();
            p.invert_axis(ndarray::Axis(1));
            NoiseBatch::new(p)
        }
    }
}

/// Matches `data` against the flipped noise, then applies the permutation to
/// the original noise rows.
pub fn assign_noise_flipped_with(
    data: &Batch,
    noise: &NoiseBatch,
    options: AssignOptions,
    flip: FlipKind,
) -> Result<Assigned> {
    check_inputs(data, noise)?;
    let flipped = flip_noise(noise, flip)?;
    let (assignment, wall_time) = match_against(data, &flipped, options)?;
    // The solver's total refers to the flipped noise; report the cost against
    // the rows actually used.
    let total_cost = paired_costs(data, noise, &assignment.perm, options.metric)?
        .iter()
        .sum();
    let assignment = Assignment {
        total_cost,
        ..assignment
    };
    finish(data, noise, assignment, options.metric, wall_time)
}

/// Identity pairing: no cost matrix, no solver.
pub fn identity_pairing(data: &Batch, noise: &NoiseBatch, metric: Metric) -> Result<Assigned> {
    check_inputs(data, noise)?;
    let perm: Vec<usize> = (0..data.n()).collect();
    let costs = paired_costs(data, noise, &perm, metric)?;
    let total_cost = costs.iter().sum();
    let c = mean(&costs);
    Ok(Assigned {
        noise: noise.clone(),
        assignment: Assignment { perm, total_cost },
        stats: AssignStats {
            pre_cost: c,
            post_cost: c,
            reduction: 0.0,
            wall_time: Duration::ZERO,
        },
    })
}

/// Dispatches on `mode`. `metric` is used by the L2 and flipped modes (L1
/// mode always uses L1); `Vanilla` never touches the solver. Flipped mode
/// negates the noise.
pub fn apply_mode(
    mode: AssignMode,
    data: &Batch,
    noise: &NoiseBatch,
    metric: Metric,
    quantize: bool,
) -> Result<Assigned> {
    apply_mode_with(mode, data, noise, metric, quantize, FlipKind::Negate)
}

/// [`apply_mode`] with a choice of flip for the flipped mode.
pub fn apply_mode_with(
    mode: AssignMode,
    data: &Batch,
    noise: &NoiseBatch,
    metric: Metric,
    quantize: bool,
    flip: FlipKind,
) -> Result<Assigned> {
    let options = AssignOptions {
        metric,
        quantize,
        shards: 1,
    };
    match mode {
        AssignMode::Vanilla => identity_pairing(data, noise, metric),
        AssignMode::ImmiscibleL2 => assign_noise_with(data, noise, options),
        AssignMode::ImmiscibleL1 => assign_noise_with(
            data,
            noise,
            AssignOptions {
                metric: Metric::L1,
                ..options
            },
        ),
        AssignMode::ImmiscibleFlipped => assign_noise_flipped_with(data, noise, options, flip),
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// One row of a distance-reduction sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub batch_size: usize,
    pub median_reduction: f64,
    pub median_wall_time: Duration,
    pub trials: Vec<AssignStats>,
}

/// Median reduction and assignment time per batch size.
///
/// Trial `k` at batch size `bs` draws its data and noise from a generator
/// seeded by `(seed, bs, k)`, so rows are reproducible independently.
pub fn distance_reduction_sweep(
    source: &dyn DataSource,
    batch_sizes: &[usize],
    options: AssignOptions,
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if batch_sizes.is_empty() {
        return Err(Error::arg("batch size list is empty"));
    }
    if let Some(&bad) = batch_sizes.iter().find(|&&b| b < 2) {
        return Err(Error::arg(format!("batch size {bad} is below 2")));
    }
    if trials == 0 {
        return Err(Error::arg("at least one trial is required"));
    }
    batch_sizes
        .iter()
        .map(|&bs| {
            let stats = (0..trials)
                .map(|k| {
                    let mut rng =
                        rng_from_seed(derive_seed(seed, stream::TRIAL, (bs as u64) << 32 | k as u64));
                    let data = source.draw(bs, &mut rng)?;
                    let noise = crate::data::sample_noise_with(bs, source.dim(), &mut rng)?;
                    Ok(assign_noise_with(&data, &noise, options)?.stats)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut red: Vec<f64> = stats.iter().map(|s| s.reduction).collect();
            let mut times: Vec<f64> = stats.iter().map(|s| s.wall_time.as_secs_f64()).collect();
            Ok(SweepRow {
                batch_size: bs,
                median_reduction: median(&mut red),
                median_wall_time: Duration::from_secs_f64(median(&mut times)),
                trials: stats,
            })
        })
        .collect()
}

/// One noise point observed in one Monte-Carlo round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairingRecord {
    pub round: usize,
    /// Distance from the noise point to the target.
    pub distance: f64,
    /// Distance to the nearest data point that differs from the target
    /// (`inf` if every data point equals it).
    pub other_distance: f64,
    /// Whether the noise point was paired with a copy of the target.
    pub assigned: bool,
}

/// Empirical assignment probability as a function of noise–target distance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalWeightCurve {
    /// `buckets + 1` increasing edges.
    pub bucket_edges: Vec<f64>,
    /// Noise points observed per bucket.
    pub counts: Vec<u64>,
    /// Of those, how many were paired with the target.
    pub assigned: Vec<u64>,
    /// `assigned / counts`, 0 for empty buckets.
    pub frequencies: Vec<f64>,
    pub rounds: usize,
}

impl ConditionalWeightCurve {
    pub fn from_records(records: &[PairingRecord], buckets: usize, rounds: usize) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::arg("bucket count must be at least 1"));
        }
        if records.is_empty() {
            return Err(Error::arg("no pairing records"));
        }
        let lo = records.iter().map(|r| r.distance).fold(f64::INFINITY, f64::min);
        let hi = records.iter().map(|r| r.distance).fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / buckets as f64 } else { 1.0 };
        let bucket_edges: Vec<f64> = (0..=buckets).map(|k| lo + width * k as f64).collect();

        let mut counts = vec![0u64; buckets];
        let mut assigned = vec![0u64; buckets];
        for r in records {
            let k = (((r.distance - lo) / width) as usize).min(buckets - 1);
            counts[k] += 1;
            assigned[k] += u64::from(r.assigned);
        }
        let frequencies = counts
            .iter()
            .zip(&assigned)
            .map(|(&c, &a)| if c == 0 { 0.0 } else { a as f64 / c as f64 })
            .collect();
        Ok(Self {
            bucket_edges,
            counts,
            assigned,
            frequencies,
            rounds,
        })
    }

    pub fn centers(&self) -> Vec<f64> {
        self.bucket_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Spearman correlation between bucket centre and frequency over the
    /// non-empty buckets.
    pub fn spearman(&self) -> f64 {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .centers()
            .into_iter()
            .zip(&self.frequencies)
            .zip(&self.counts)
            .filter(|(_, &c)| c > 0)
            .map(|((x, &y), _)| (x, y))
            .unzip();
        spearman(&x, &y)
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Rank correlation with average ranks for ties; NaN when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Noise generator for Monte-Carlo rounds: `(n, d, seed) → noise`.
pub type NoiseSampler<'a> = &'a (dyn Fn(usize, usize, u64) -> Result<NoiseBatch> + Sync);

pub fn standard_noise(n: usize, d: usize, seed: u64) -> Result<NoiseBatch> {
    crate::data::sample_noise(n, d, seed)
}

/// Raw per-noise-point observations behind [`empirical_conditional_weights`].
///
/// Data rows equal to `target` all count as the target. Rounds use seeds
/// derived from `(seed, round)` and may run in parallel; the output order is
/// by round, then noise index.
pub fn conditional_pairing_records(
    target: &[f64],
    data: &Batch,
    sampler: NoiseSampler<'_>,
    rounds: usize,
    metric: Metric,
    seed: u64,
) -> Result<Vec<PairingRecord>> {
    if target.len() != data.d() {
        return Err(Error::dim("target dimension differs from data"));
    }
    let is_target: Vec<bool> = (0..data.n()).map(|i| data.row_slice(i) == target).collect();
    if !is_target.iter().any(|&t| t) {
        return Err(Error::arg("target is not a row of the data batch"));
    }
    if rounds == 0 {
        return Err(Error::arg("at least one round is required"));
    }
    let others: Vec<usize> = (0..data.n()).filter(|&i| !is_target[i]).collect();
    let (n, d) = (data.n(), data.d());

    let per_round: Vec<Vec<PairingRecord>> = (0..rounds)
        .into_par_iter()
        .map(|round| {
            let noise = sampler(n, d, derive_seed(seed, stream::MONTE_CARLO, round as u64))?;
            let assigned = assign_noise(data, &noise, metric, false)?;
            let mut to_target = vec![false; n];
            for (i, &j) in assigned.assignment.perm.iter().enumerate() {
                to_target[j] = is_target[i];
            }
            Ok((0..n)
                .map(|j| {
                    let x = noise.row_slice(j);
                    PairingRecord {
                        round,
                        distance: metric.distance(x, target),
                        other_distance: others
                            .iter()
                            .map(|&i| metric.distance(x, data.row_slice(i)))
                            .fold(f64::INFINITY, f64::min),
                        assigned: to_target[j],
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_round.concat())
}

/// Monte-Carlo estimate of how often a noise point at a given distance from
/// `target` is paired with it.
pub fn empirical_conditional_weights(
    target: &[f64],
    data: &Batch,
    sampler: NoiseSampler<'_>,
    rounds: usize,
    buckets: usize,
    seed: u64,
) -> Result<ConditionalWeightCurve> {
    let records = conditional_pairing_records(target, data, sampler, rounds, Metric::L2, seed)?;
    ConditionalWeightCurve::from_records(&records, buckets, rounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_noise, GaussianSource};
    use crate::lap::{is_permutation, solve_calls};

    fn batch(rows: &[[f64; 2]]) -> Batch {
        Batch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn sorted_rows(b: &NoiseBatch) -> Vec<Vec<u64>> {
        let mut rows: Vec<Vec<u64>> = (0..b.n())
            .map(|i| b.row_slice(i).iter().map(|x| x.to_bits()).collect())
            .collect();
        rows.sort();
        rows
    }

    #[test]
    fn nearest_pairing_is_forced() {
        let data = batch(&[[1.0, 0.0], [-1.0, 0.0]]);
        let noise: NoiseBatch = batch(&[[-0.9, 0.0], [0.9, 0.0]]).into();
        let out = assign_noise(&data, &noise, Metric::L2, false).unwrap();
        assert_eq!(out.noise.row_slice(0), &[0.9, 0.0]);
        assert_eq!(out.noise.row_slice(1), &[-0.9, 0.0]);
        assert!((out.assignment.total_cost - 0.2).abs() < 1e-12);
        assert!((out.stats.pre_cost * 2.0 - 3.8).abs() < 1e-12);
        assert!(out.stats.reduction < 0.0);
    }

    #[test]
    fn single_pair_is_unchanged() {
        let data = batch(&[[0.3, 0.1]]);
        let noise: NoiseBatch = batch(&[[1.0, -2.0]]).into();
        let out = assign_noise(&data, &noise, Metric::L2, false).unwrap();
        assert_eq!(out.noise, noise);
        assert_eq!(out.stats.reduction, 0.0);
    }

    #[test]
    fn flipped_two_point_mirror() {
        let data = batch(&[[1.0, 0.0], [-1.0, 0.0]]);
        let noise: NoiseBatch = batch(&[[0.9, 0.0], [-0.9, 0.0]]).into();
        let out = assign_noise_flipped(&data, &noise).unwrap();
        assert_eq!(out.noise.row_slice(0), &[-0.9, 0.0]);
        assert_eq!(out.noise.row_slice(1), &[0.9, 0.0]);
        assert!(out.stats.post_cost > out.stats.pre_cost);
        assert!((out.assignment.total_cost - 3.8).abs() < 1e-12);
    }

    #[test]
    fn reverse_order_flip() {
        let noise: NoiseBatch = batch(&[[1.0, 2.0], [3.0, 4.0]]).into();
        let r = flip_noise(&noise, FlipKind::ReverseOrder).unwrap();
        assert_eq!(r.row_slice(0), &[2.0, 1.0]);
        assert_eq!(r.row_slice(1), &[4.0, 3.0]);
        let data: Batch = sample_noise(16, 5, 1).unwrap().into();
        let noise = sample_noise(16, 5, 2).unwrap();
        let out =
            assign_noise_flipped_with(&data, &noise, AssignOptions::default(), FlipKind::ReverseOrder)
                .unwrap();
        assert_eq!(sorted_rows(&out.noise), sorted_rows(&noise));
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let data = batch(&[[1.0, 0.0], [-1.0, 0.0]]);
        let noise: NoiseBatch = batch(&[[0.9, 0.0]]).into();
        assert!(assign_noise(&data, &noise, Metric::L2, false).is_err());
        assert!(assign_noise_flipped(&data, &noise).is_err());
        assert!(apply_mode(AssignMode::Vanilla, &data, &noise, Metric::L2, false).is_err());
    }

    #[test]
    fn every_mode_preserves_noise_multiset() {
        for seed in 0..10 {
            let data: Batch = sample_noise(20, 6, seed).unwrap().into();
            let noise = sample_noise(20, 6, seed + 100).unwrap();
            for mode in AssignMode::ALL {
                for quantize in [false, true] {
                    let out = apply_mode(mode, &data, &noise, Metric::L2, quantize).unwrap();
                    assert!(is_permutation(&out.assignment.perm));
                    assert_eq!(sorted_rows(&out.noise), sorted_rows(&noise), "{mode}");
                    assert_eq!(out.noise, noise.select_rows(&out.assignment.perm).unwrap());
                }
            }
        }
    }

    #[test]
    fn vanilla_skips_solver() {
        let data: Batch = sample_noise(8, 3, 1).unwrap().into();
        let noise = sample_noise(8, 3, 2).unwrap();
        let before = solve_calls();
        let out = apply_mode(AssignMode::Vanilla, &data, &noise, Metric::L2, false).unwrap();
        assert_eq!(solve_calls(), before);
        assert_eq!(out.noise, noise);
        apply_mode(AssignMode::ImmiscibleL2, &data, &noise, Metric::L2, false).unwrap();
        assert_eq!(solve_calls(), before + 1);
    }

    #[test]
    fn l1_mode_uses_l1() {
        let data: Batch = sample_noise(12, 4, 3).unwrap().into();
        let noise = sample_noise(12, 4, 4).unwrap();
        let a = apply_mode(AssignMode::ImmiscibleL1, &data, &noise, Metric::L2, false).unwrap();
        let b = assign_noise(&data, &noise, Metric::L1, false).unwrap();
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn optimal_beats_identity_and_random() {
        use rand::seq::SliceRandom;
        let mut rng = rng_from_seed(5);
        for seed in 0..5 {
            let data: Batch = sample_noise(32, 10, seed).unwrap().into();
            let noise = sample_noise(32, 10, seed + 50).unwrap();
            for metric in [Metric::L2, Metric::L1] {
                let out = assign_noise(&data, &noise, metric, false).unwrap();
                assert!(out.stats.post_cost <= out.stats.pre_cost);
                let total = out.assignment.total_cost;
                let mut p: Vec<usize> = (0..32).collect();
                for _ in 0..100 {
                    p.shuffle(&mut rng);
                    let c: f64 = paired_costs(&data, &noise, &p, metric).unwrap().iter().sum();
                    assert!(total <= c + 1e-9);
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let data: Batch = sample_noise(64, 8, 1).unwrap().into();
        let noise = sample_noise(64, 8, 2).unwrap();
        let a = assign_noise(&data, &noise, Metric::L2, true).unwrap();
        let b = assign_noise(&data, &noise, Metric::L2, true).unwrap();
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn sweep_validates_arguments() {
        let src = GaussianSource { d: 4 };
        let o = AssignOptions::default();
        assert!(distance_reduction_sweep(&src, &[], o, 1, 0).is_err());
        assert!(distance_reduction_sweep(&src, &[1], o, 1, 0).is_err());
        assert!(distance_reduction_sweep(&src, &[4], o, 0, 0).is_err());
        let rows = distance_reduction_sweep(&src, &[4, 8], o, 3, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.trials.len() == 3 && r.median_reduction <= 0.0));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn single_point_data_is_always_assigned() {
        let data = batch(&[[0.5, -0.5]]);
        let curve =
            empirical_conditional_weights(&[0.5, -0.5], &data, &standard_noise, 100, 5, 3).unwrap();
        for (&f, &c) in curve.frequencies.iter().zip(&curve.counts) {
            if c > 0 {
                assert_eq!(f, 1.0);
            }
        }
        assert_eq!(curve.counts.iter().sum::<u64>(), 100);
    }

    #[test]
    fn conditional_weights_argument_errors() {
        let data = batch(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(empirical_conditional_weights(&[2.0, 2.0], &data, &standard_noise, 10, 4, 0).is_err());
        assert!(empirical_conditional_weights(&[0.0], &data, &standard_noise, 10, 4, 0).is_err());
        assert!(empirical_conditional_weights(&[0.0, 0.0], &data, &standard_noise, 0, 4, 0).is_err());
        assert!(empirical_conditional_weights(&[0.0, 0.0], &data, &standard_noise, 10, 0, 0).is_err());
    }

    #[test]
    fn curve_buckets_cover_records() {
        let data = batch(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]);
        let records =
            conditional_pairing_records(&[0.0, 0.0], &data, &standard_noise, 50, Metric::L2, 9)
                .unwrap();
        assert_eq!(records.len(), 150);
        let curve = ConditionalWeightCurve::from_records(&records, 6, 50).unwrap();
        assert_eq!(curve.counts.iter().sum::<u64>(), 150);
        assert_eq!(curve.bucket_edges.len(), 7);
        assert!(curve.bucket_edges.windows(2).all(|w| w[0] < w[1]));
        // Exactly one noise point per round goes to the single target copy.
        assert_eq!(curve.assigned.iter().sum::<u64>(), 50);
    }
}
