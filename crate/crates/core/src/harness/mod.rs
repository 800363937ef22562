//! Experiment orchestration: configuration, training runs, mode comparisons,
//! assignment benchmarks and CSV output.

pub mod bench;
pub mod compare;
pub mod config;
pub mod swd;
pub mod train;

pub use bench::{assign_bench, assign_bench_csv, cond_weights_csv, BenchRow};
pub use compare::{compare_modes, CompareReport, ModeSummary, RunRecord};
pub use config::TrainConfig;
pub use swd::sliced_wasserstein;
pub use train::{train_one, train_partial, write_run, MetricsRecord, RunOutput};

/// Fixed float formatting for every CSV the harness writes: 17 significant
/// digits in scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// First line of every report that carries quality numbers.
pub const QUALITY_METRIC_NOTE: &str =
    "# quality metric: sliced Wasserstein distance to fresh target samples (stands in for FID)";
