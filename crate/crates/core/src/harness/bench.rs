//! Assignment benchmarks and conditional-weight tables.

use std::fmt::Write as _;

use crate::assign::{distance_reduction_sweep, AssignOptions, ConditionalWeightCurve};
use crate::data::{DataSource, ToyDataset};
use crate::harness::fmt_f64;
use crate::{Batch, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub batch_size: usize,
    /// Median relative reduction in percent; negative means shorter pairs.
    pub reduction_pct_median: f64,
    /// Median cost matrix plus solver time.
    pub time_ms_median: f64,
}

pub const BENCH_HEADER: &str = "batch_size,reduction_pct_median,time_ms_median";

/// Median distance reduction and assignment time per batch size.
pub fn assign_bench(
    source: &dyn DataSource,
    batch_sizes: &[usize],
    trials: usize,
    options: AssignOptions,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    Ok(distance_reduction_sweep(source, batch_sizes, options, trials, seed)?
        .into_iter()
        .map(|r| BenchRow {
            batch_size: r.batch_size,
            reduction_pct_median: 100.0 * r.median_reduction,
            time_ms_median: r.median_wall_time.as_secs_f64() * 1e3,
        })
        .collect())
}

pub fn assign_bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{}",
            r.batch_size,
            fmt_f64(r.reduction_pct_median),
            fmt_f64(r.time_ms_median)
        );
    }
    s
}

pub fn cond_weights_csv(curve: &ConditionalWeightCurve) -> String {
    let mut s = String::from("bucket_lo,bucket_hi,count,assigned,frequency\n");
    for (k, w) in curve.bucket_edges.windows(2).enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            fmt_f64(w[0]),
            fmt_f64(w[1]),
            curve.counts[k],
            curve.assigned[k],
            fmt_f64(curve.frequencies[k])
        );
    }
    s
}

/// `copies` rows of each point, grouped by point.
pub fn replicated(points: &[[f64; 2]], copies: usize) -> Result<Batch> {
    let rows: Vec<Vec<f64>> = points
        .iter()
        .flat_map(|p| std::iter::repeat(p.to_vec()).take(copies))
        .collect();
    Batch::from_rows(&rows)
}

/// Two sources at `(±5, 0)`.
pub fn two_point_data(copies: usize) -> Result<Batch> {
    replicated(&[[5.0, 0.0], [-5.0, 0.0]], copies)
}

/// The eight ring centres of radius `scale`.
pub fn eight_point_data(scale: f64, copies: usize) -> Result<Batch> {
    replicated(&ToyDataset::gauss8_centers(scale), copies)
}
