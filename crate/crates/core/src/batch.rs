//! Point sets: data batches and noise batches.
//!
//! Both are `n × d` matrices of finite `f64` values with `n, d ≥ 1`. They are
//! kept as separate types so that call sites cannot silently swap the data
//! and noise arguments of the assignment routines.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::{Error, Result};

fn validate(points: &Array2<f64>, what: &str) -> Result<()> {
    let (n, d) = points.dim();
    if n == 0 || d == 0 {
        return Err(Error::dim(format!("{what} must be non-empty, got {n}x{d}")));
    }
    if let Some(((i, j), v)) = points.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} entry ({i}, {j}) is {v}")));
    }
    Ok(())
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().position(|r| r.len() != d) {
        return Err(Error::dim(format!(
            "{what} row {bad} has {} columns, expected {d}",
            rows[bad].len()
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n, d), flat).map_err(|e| Error::dim(e.to_string()))
}

macro_rules! point_set {
    ($name:ident, $what:literal) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            points: Array2<f64>,
        }

        impl $name {
            pub fn new(points: Array2<f64>) -> Result<Self> {
                validate(&points, $what)?;
                // Row slices are handed to the cost kernels, so keep rows contiguous.
                let points = if points.is_standard_layout() {
                    points
                } else {
                    points.as_standard_layout().into_owned()
                };
                Ok(Self { points })
            }

            pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
                Self::new(from_rows(rows, $what)?)
            }

            pub fn n(&self) -> usize {
                self.points.nrows()
            }

            pub fn d(&self) -> usize {
                self.points.ncols()
            }

            pub fn view(&self) -> ArrayView2<'_, f64> {
                self.points.view()
            }

            pub fn points(&self) -> &Array2<f64> {
                &self.points
            }

            pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
                self.points.row(i)
            }

            pub fn row_slice(&self, i: usize) -> &[f64] {
                let d = self.d();
                &self.as_slice()[i * d..(i + 1) * d]
            }

            /// Row-major contiguous storage.
            pub fn as_slice(&self) -> &[f64] {
                self.points
                    .as_slice()
                    .expect("point sets are kept in standard layout")
            }

            pub fn into_inner(self) -> Array2<f64> {
                self.points
            }

            /// New set whose row `i` is row `perm[i]` of `self`.
            pub fn select_rows(&self, perm: &[usize]) -> Result<Self> {
                if perm.len() != self.n() {
                    return Err(Error::dim(format!(
                        "permutation of length {} for {} rows",
                        perm.len(),
                        self.n()
                    )));
                }
                if let Some(&bad) = perm.iter().find(|&&p| p >= self.n()) {
                    return Err(Error::arg(format!("row index {bad} out of range")));
                }
                let d = self.d();
                let src = self.as_slice();
                let mut out = Vec::with_capacity(self.n() * d);
                for &p in perm {
                    out.extend_from_slice(&src[p * d..(p + 1) * d]);
                }
                let points = Array2::from_shape_vec((self.n(), d), out)
                    .expect("shape preserved by construction");
                Ok(Self { points })
            }

            /// Elementwise map that must keep every entry finite.
            pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
                Self::new(self.points.mapv(f))
            }
        }
    };
}

point_set!(Batch, "batch");
point_set!(NoiseBatch, "noise batch");

impl From<NoiseBatch> for Batch {
    fn from(noise: NoiseBatch) -> Self {
        Batch {
            points: noise.points,
        }
    }
}

impl From<Batch> for NoiseBatch {
    fn from(batch: Batch) -> Self {
        NoiseBatch {
            points: batch.points,
        }
    }
}

pub(crate) fn check_same_shape(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim(format!(
            "shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(Batch::new(Array2::zeros((0, 2))).is_err());
        assert!(Batch::new(Array2::zeros((2, 0))).is_err());
        assert!(matches!(
            NoiseBatch::new(array![[0.0, f64::NAN]]),
            Err(Error::Numeric(_))
        ));
        assert!(Batch::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn select_rows_reorders() {
        let b = Batch::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
        let p = b.select_rows(&[2, 0, 1]).unwrap();
        assert_eq!(p.row_slice(0), &[3.0, 3.0]);
        assert_eq!(p.row_slice(1), &[1.0, 1.0]);
        assert!(b.select_rows(&[0, 1]).is_err());
        assert!(b.select_rows(&[0, 1, 3]).is_err());
    }

    #[test]
    fn non_standard_layout_is_normalized() {
        let t = array![[1.0, 2.0], [3.0, 4.0]].reversed_axes();
        let b = Batch::new(t).unwrap();
        assert_eq!(b.as_slice(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
