//! Pairwise data/noise cost matrices.
//!
//! Costs are computed row by row with no cross-row accumulation, so splitting
//! the rows into shards and concatenating the results reproduces the
//! unsharded matrix bit for bit.
//!
//! The quantized path rounds both batches to binary16. Every binary16 value is
//! exact in `f32`, so the rounded inputs are stored as `f32` and the kernel
//! runs at twice the SIMD width of the `f64` one. Lane sums are flushed into
//! an `f64` total every [`F32_BLOCK`] coordinates.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use half::f16;
use ndarray::Array2;
use rayon::prelude::*;

use crate::batch::{check_same_shape, Batch, NoiseBatch};
use crate::lap::CostMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Metric {
    L1,
    #[default]
    L2,
    L2Sq,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::L1, Metric::L2, Metric::L2Sq];

    pub fn name(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::L2Sq => "l2sq",
        }
    }

    /// Distance between two equal-length vectors, in `f64`.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        pair_cost(a, b, self)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            "l2sq" => Ok(Metric::L2Sq),
            other => Err(Error::arg(format!("unknown metric {other:?} (l1, l2, l2sq)"))),
        }
    }
}

/// Working precision of a cost computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Full,
    /// Inputs rounded to binary16 before the distances are taken.
    Half,
}

impl Precision {
    pub fn from_flag(quantize: bool) -> Self {
        if quantize {
            Precision::Half
        } else {
            Precision::Full
        }
    }
}

const LANES_F64: usize = 8;
const LANES_F32: usize = 16;
const F32_BLOCK: usize = 256;

#[inline(always)]
fn pair_cost(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES_F64];
    let ca = a.chunks_exact(LANES_F64);
    let cb = b.chunks_exact(LANES_F64);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut tail = 0.0;
    match metric {
        Metric::L1 => {
            for (x, y) in ca.zip(cb) {
                for l in 0..LANES_F64 {
                    acc[l] += (x[l] - y[l]).abs();
                }
            }
            for (x, y) in ra.iter().zip(rb) {
                tail += (x - y).abs();
            }
        }
        Metric::L2 | Metric::L2Sq => {
            for (x, y) in ca.zip(cb) {
                for l in 0..LANES_F64 {
                    let d = x[l] - y[l];
                    acc[l] += d * d;
                }
            }
            for (x, y) in ra.iter().zip(rb) {
                let d = x - y;
                tail += d * d;
            }
        }
    }
    let s = acc.iter().sum::<f64>() + tail;
    if metric == Metric::L2 {
        s.sqrt()
    } else {
        s
    }
}

#[inline(always)]
fn lanes_f32(x: &[f32], y: &[f32], metric: Metric) -> f64 {
    let mut acc = [0.0f32; LANES_F32];
    let cx = x.chunks_exact(LANES_F32);
    let cy = y.chunks_exact(LANES_F32);
    let (rx, ry) = (cx.remainder(), cy.remainder());
    let mut tail = 0.0f64;
    match metric {
        Metric::L1 => {
            for (p, q) in cx.zip(cy) {
                for l in 0..LANES_F32 {
                    acc[l] += (p[l] - q[l]).abs();
                }
            }
            for (p, q) in rx.iter().zip(ry) {
                tail += f64::from((p - q).abs());
            }
        }
        Metric::L2 | Metric::L2Sq => {
            for (p, q) in cx.zip(cy) {
                for l in 0..LANES_F32 {
                    let d = p[l] - q[l];
                    acc[l] += d * d;
                }
            }
            for (p, q) in rx.iter().zip(ry) {
                let d = f64::from(p - q);
                tail += d * d;
            }
        }
    }
    acc.iter().map(|&v| f64::from(v)).sum::<f64>() + tail
}

#[inline(always)]
fn pair_cost_f32(a: &[f32], b: &[f32], metric: Metric) -> f64 {
    let s: f64 = a
        .chunks(F32_BLOCK)
        .zip(b.chunks(F32_BLOCK))
        .map(|(x, y)| lanes_f32(x, y, metric))
        .sum();
    if metric == Metric::L2 {
        s.sqrt()
    } else {
        s
    }
}

// Data rows per tile; the tile stays cache-resident while noise rows stream past.
const ROW_TILE: usize = 16;

fn fill_rows<T>(
    a: &[T],
    b: &[T],
    d: usize,
    rows: Range<usize>,
    out: &mut [f64],
    kernel: impl Fn(&[T], &[T]) -> f64,
) {
    let m = b.len() / d;
    debug_assert_eq!(out.len(), rows.len() * m);
    let start = rows.start;
    for tile in (rows.start..rows.end).step_by(ROW_TILE) {
        let tile_end = (tile + ROW_TILE).min(rows.end);
        for j in 0..m {
            let y = &b[j * d..(j + 1) * d];
            for i in tile..tile_end {
                out[(i - start) * m + j] = kernel(&a[i * d..(i + 1) * d], y);
            }
        }
    }
}

/// Batch rounded to binary16 and held as `f32`.
#[derive(Debug, Clone)]
struct HalfRows {
    values: Vec<f32>,
}

impl HalfRows {
    fn from_slice(values: &[f64]) -> Result<Self> {
        let values = values
            .iter()
            .map(|&x| round_to_half(x).map(|h| h.to_f32()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { values })
    }
}

fn round_to_half(x: f64) -> Result<f16> {
    if !x.is_finite() || x.abs() > f64::from(f16::MAX) {
        return Err(Error::Range { value: x });
    }
    Ok(f16::from_f64(x))
}

/// Nearest binary16 value of `x`, widened back to `f64`.
pub fn quantize_value(x: f64) -> Result<f64> {
    round_to_half(x).map(f64::from)
}

/// Point sets that can be rounded to binary16 entrywise.
pub trait Quantize: Sized {
    fn quantize(&self) -> Result<Self>;
}

macro_rules! impl_quantize {
    ($t:ty) => {
        impl Quantize for $t {
            fn quantize(&self) -> Result<Self> {
                let values = self
                    .as_slice()
                    .iter()
                    .map(|&x| quantize_value(x))
                    .collect::<Result<Vec<_>>>()?;
                let points = Array2::from_shape_vec((self.n(), self.d()), values)
                    .expect("shape preserved");
                Self::new(points)
            }
        }
    };
}

impl_quantize!(Batch);
impl_quantize!(NoiseBatch);

/// Rounds every entry to the nearest binary16 value and widens it back.
pub fn quantize_batch<B: Quantize>(batch: &B) -> Result<B> {
    batch.quantize()
}

fn check_shapes(data: &Batch, noise: &NoiseBatch) -> Result<()> {
    if data.n() != noise.n() {
        return Err(Error::dim(format!(
            "{} data rows but {} noise rows",
            data.n(),
            noise.n()
        )));
    }
    check_same_shape(data.view(), noise.view())
}

fn shard_ranges(n: usize, shards: usize) -> Vec<Range<usize>> {
    let base = n / shards;
    let extra = n % shards;
    let mut start = 0;
    (0..shards)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn compute(
    data: &Batch,
    noise: &NoiseBatch,
    metric: Metric,
    precision: Precision,
    shards: usize,
) -> Result<CostMatrix> {
    check_shapes(data, noise)?;
    let n = data.n();
    if shards == 0 || shards > n {
        return Err(Error::arg(format!("shard count {shards} outside 1..={n}")));
    }
    let d = data.d();
    let ranges = shard_ranges(n, shards);

    // A single shard stays on the calling thread.
    fn run(ranges: Vec<Range<usize>>, fill: impl Fn(Range<usize>) -> Vec<f64> + Sync + Send) -> Vec<Vec<f64>> {
        if ranges.len() == 1 {
            ranges.into_iter().map(fill).collect()
        } else {
            ranges.into_par_iter().map(fill).collect()
        }
    }

    let blocks = match precision {
        Precision::Full => {
            let (a, b) = (data.as_slice(), noise.as_slice());
            run(ranges, |r| {
                let mut out = vec![0.0; r.len() * n];
                fill_rows(a, b, d, r, &mut out, |x, y| pair_cost(x, y, metric));
                out
            })
        }
        Precision::Half => {
            let a = HalfRows::from_slice(data.as_slice())?;
            let b = HalfRows::from_slice(noise.as_slice())?;
            run(ranges, |r| {
                let mut out = vec![0.0; r.len() * n];
                fill_rows(&a.values, &b.values, d, r, &mut out, |x, y| {
                    pair_cost_f32(x, y, metric)
                });
                out
            })
        }
    };

    let flat: Vec<f64> = blocks.concat();
    CostMatrix::new(Array2::from_shape_vec((n, n), flat).expect("n*n entries"))
}

/// `costs[i][j]` = distance between data row `i` and noise row `j`.
pub fn pairwise_cost(data: &Batch, noise: &NoiseBatch, metric: Metric) -> Result<CostMatrix> {
    compute(data, noise, metric, Precision::Full, 1)
}

/// Same as [`pairwise_cost`], with rows split into `shards` contiguous ranges
/// that are computed independently and concatenated.
pub fn sharded_pairwise_cost(
    data: &Batch,
    noise: &NoiseBatch,
    metric: Metric,
    shards: usize,
) -> Result<CostMatrix> {
    compute(data, noise, metric, Precision::Full, shards)
}

/// Cost matrix at the requested precision, optionally sharded.
pub fn pairwise_cost_with(
    data: &Batch,
    noise: &NoiseBatch,
    metric: Metric,
    precision: Precision,
    shards: usize,
) -> Result<CostMatrix> {
    compute(data, noise, metric, precision, shards)
}

/// Distances between row `i` of `data` and row `perm[i]` of `noise`, at full precision.
pub fn paired_costs(
    data: &Batch,
    noise: &NoiseBatch,
    perm: &[usize],
    metric: Metric,
) -> Result<Vec<f64>> {
    check_shapes(data, noise)?;
    if perm.len() != data.n() {
        return Err(Error::dim("permutation length differs from batch size"));
    }
    Ok(perm
        .iter()
        .enumerate()
        .map(|(i, &j)| pair_cost(data.row_slice(i), noise.row_slice(j), metric))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_noise;
    use proptest::prelude::*;

    fn batch(rows: &[&[f64]]) -> Batch {
        Batch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn noise(rows: &[&[f64]]) -> NoiseBatch {
        batch(rows).into()
    }

    #[test]
    fn three_four_five() {
        let a = batch(&[&[0.0, 0.0]]);
        let b = noise(&[&[3.0, 4.0]]);
        assert_eq!(pairwise_cost(&a, &b, Metric::L2).unwrap().get(0, 0), 5.0);
        assert_eq!(pairwise_cost(&a, &b, Metric::L1).unwrap().get(0, 0), 7.0);
        assert_eq!(pairwise_cost(&a, &b, Metric::L2Sq).unwrap().get(0, 0), 25.0);
    }

    #[test]
    fn two_by_two_l2() {
        let a = batch(&[&[1.0, 1.0], &[-1.0, -1.0]]);
        let b = noise(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let c = pairwise_cost(&a, &b, Metric::L2).unwrap();
        let r5 = 5f64.sqrt();
        assert_eq!(c.get(0, 0), 1.0);
        assert_eq!(c.get(1, 1), 1.0);
        assert!((c.get(0, 1) - r5).abs() < 1e-15);
        assert!((c.get(1, 0) - r5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = batch(&[&[0.0, 0.0]]);
        let b = noise(&[&[0.0, 0.0, 0.0]]);
        assert!(matches!(pairwise_cost(&a, &b, Metric::L2), Err(Error::Dimension(_))));
        let c = noise(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(pairwise_cost(&a, &c, Metric::L2), Err(Error::Dimension(_))));
    }

    #[test]
    fn quantize_known_values() {
        assert_eq!(quantize_value(1.0).unwrap(), 1.0);
        assert_eq!(quantize_value(0.1).unwrap(), 0.0999755859375);
        assert_eq!(quantize_value(65504.0).unwrap(), 65504.0);
        assert!(matches!(quantize_value(70000.0), Err(Error::Range { .. })));
        assert!(matches!(quantize_value(-65505.0), Err(Error::Range { .. })));
    }

    #[test]
    fn quantize_matches_mantissa_rounding() {
        // Independent route: round the significand to 10 fractional bits.
        fn oracle(x: f64) -> f64 {
            if x == 0.0 {
                return 0.0;
            }
            let e = x.abs().log2().floor().max(-14.0);
            let ulp = 2f64.powf(e - 10.0);
            let q = x / ulp;
            let r = q.round();
            // ties to even
            let r = if (q - q.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
                r - q.signum()
            } else {
                r
            };
            r * ulp
        }
        let noise = sample_noise(200, 50, 3).unwrap();
        for &x in noise.as_slice() {
            let x = x * 37.0;
            assert_eq!(quantize_value(x).unwrap(), oracle(x), "x = {x}");
        }
        assert_eq!(oracle(0.1), 0.0999755859375);
    }

    #[test]
    fn quantize_is_idempotent() {
        let b = sample_noise(100, 100, 11).unwrap();
        let once = quantize_batch(&b).unwrap();
        let twice = quantize_batch(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn sharding_is_bit_identical() {
        let a: Batch = sample_noise(16, 33, 1).unwrap().into();
        let b = sample_noise(16, 33, 2).unwrap();
        for metric in Metric::ALL {
            for precision in [Precision::Full, Precision::Half] {
                let one = pairwise_cost_with(&a, &b, metric, precision, 1).unwrap();
                for shards in [2, 3, 4, 7, 16] {
                    let many = pairwise_cost_with(&a, &b, metric, precision, shards).unwrap();
                    let same = one
                        .view()
                        .iter()
                        .zip(many.view().iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits());
                    assert!(same, "{metric} {precision:?} shards={shards}");
                }
            }
        }
        assert_eq!(
            pairwise_cost(&a, &b, Metric::L2).unwrap(),
            sharded_pairwise_cost(&a, &b, Metric::L2, 1).unwrap()
        );
    }

    #[test]
    fn shard_count_out_of_range() {
        let a: Batch = sample_noise(4, 2, 1).unwrap().into();
        let b = sample_noise(4, 2, 2).unwrap();
        assert!(sharded_pairwise_cost(&a, &b, Metric::L2, 0).is_err());
        assert!(sharded_pairwise_cost(&a, &b, Metric::L2, 5).is_err());
    }

    #[test]
    fn shard_ranges_cover_rows() {
        let r = shard_ranges(10, 3);
        assert_eq!(r, vec![0..4, 4..7, 7..10]);
    }

    #[test]
    fn quantized_cost_error_is_small_at_image_dimension() {
        let a: Batch = sample_noise(32, 3072, 5).unwrap().into();
        let b = sample_noise(32, 3072, 6).unwrap();
        for metric in Metric::ALL {
            let full = pairwise_cost(&a, &b, metric).unwrap();
            let half = pairwise_cost_with(&a, &b, metric, Precision::Half, 1).unwrap();
            for (f, h) in full.view().iter().zip(half.view().iter()) {
                assert!((h - f).abs() / (f + 1e-12) <= 2e-3, "{metric}: {f} vs {h}");
            }
        }
    }

    #[test]
    fn half_kernel_matches_quantize_then_full() {
        let a: Batch = sample_noise(8, 700, 9).unwrap().into();
        let b = sample_noise(8, 700, 10).unwrap();
        let qa = quantize_batch(&a).unwrap();
        let qb = quantize_batch(&b).unwrap();
        for metric in Metric::ALL {
            let via_f64 = pairwise_cost(&qa, &qb, metric).unwrap();
            let via_f32 = pairwise_cost_with(&a, &b, metric, Precision::Half, 1).unwrap();
            for (x, y) in via_f64.view().iter().zip(via_f32.view().iter()) {
                assert!((x - y).abs() <= 1e-5 * x.max(1.0), "{metric}: {x} vs {y}");
            }
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_zero_on_self(seed in any::<u64>(), n in 1usize..6, d in 1usize..20) {
            let a = sample_noise(n, d, seed).unwrap();
            let b = sample_noise(n, d, seed ^ 0xabcdef).unwrap();
            for metric in Metric::ALL {
                let ab = pairwise_cost(&a.clone().into(), &b, metric).unwrap();
                let ba = pairwise_cost(&b.clone().into(), &a, metric).unwrap();
                let (abv, bav) = (ab.view(), ba.view());
                prop_assert_eq!(abv.t(), bav);
                let aa = pairwise_cost(&a.clone().into(), &a, metric).unwrap();
                for i in 0..n {
                    prop_assert_eq!(aa.get(i, i), 0.0);
                }
            }
            let l2 = pairwise_cost(&a.clone().into(), &b, Metric::L2).unwrap();
            let sq = pairwise_cost(&a.clone().into(), &b, Metric::L2Sq).unwrap();
            for (x, y) in l2.view().iter().zip(sq.view().iter()) {
                prop_assert!((x * x - y).abs() <= 1e-6 * y.max(1e-300));
            }
        }
    }
}
