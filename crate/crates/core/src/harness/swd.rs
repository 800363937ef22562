//! Sliced 2-Wasserstein distance between two point clouds.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::rng_from_seed;
use crate::{Batch, Error, Result};

/// Squared 2-Wasserstein distance between two sorted 1-D samples.
///
/// Equal sizes reduce to the mean squared difference of order statistics;
/// unequal sizes integrate the squared difference of the two quantile
/// functions over their merged breakpoints.
pub fn w2_squared_sorted(x: &[f64], y: &[f64]) -> f64 {
    let (n, m) = (x.len(), y.len());
    if n == m {
        return x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_x = (i + 1) as f64 / n as f64;
        let next_y = (j + 1) as f64 / m as f64;
        let next = next_x.min(next_y);
        total += (next - u) * (x[i] - y[j]).powi(2);
        u = next;
        if next_x <= next {
            i += 1;
        }
        if next_y <= next {
            j += 1;
        }
    }
    total
}

fn project_sorted(b: &Batch, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = (0..b.n())
        .map(|i| b.row_slice(i).iter().zip(dir).map(|(x, u)| x * u).sum())
        .collect();
    p.sort_by(f64::total_cmp);
    p
}

/// `sqrt(mean_u W2²(u·a, u·b))` over `projections` random unit directions
/// drawn from `seed`.
pub fn sliced_wasserstein(a: &Batch, b: &Batch, projections: usize, seed: u64) -> Result<f64> {
    if a.d() != b.d() {
        return Err(Error::dim(format!("dimensions {} and {} differ", a.d(), b.d())));
    }
    if projections == 0 {
        return Err(Error::arg("at least one projection is required"));
    }
    let d = a.d();
    let mut rng = rng_from_seed(seed);
    let mut total = 0.0;
    for _ in 0..projections {
        let dir = loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
            }
        };
        total += w2_squared_sorted(&project_sorted(a, &dir), &project_sorted(b, &dir));
    }
    Ok((total / projections as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_noise;

    #[test]
    fn self_distance_is_zero_and_symmetric() {
        let a: Batch = sample_noise(300, 3, 1).unwrap().into();
        let b: Batch = sample_noise(300, 3, 2).unwrap().into();
        assert_eq!(sliced_wasserstein(&a, &a, 16, 0).unwrap(), 0.0);
        assert_eq!(
            sliced_wasserstein(&a, &b, 16, 5).unwrap(),
            sliced_wasserstein(&b, &a, 16, 5).unwrap()
        );
        let c: Batch = sample_noise(300, 2, 2).unwrap().into();
        assert!(sliced_wasserstein(&a, &c, 16, 5).is_err());
        assert!(sliced_wasserstein(&a, &b, 0, 5).is_err());
    }

    #[test]
    fn translation_in_one_dimension() {
        let a = Batch::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let b = a.map(|x| x + 3.0).unwrap();
        assert!((sliced_wasserstein(&a, &b, 4, 0).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn unequal_sizes_use_quantiles() {
        // {0, 1} vs {0, 0, 1, 1}: identical quantile functions.
        assert_eq!(w2_squared_sorted(&[0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]), 0.0);
        // {0} vs {0, 2}: half the mass moves by 2.
        assert!((w2_squared_sorted(&[0.0], &[0.0, 2.0]) - 2.0).abs() < 1e-15);
        assert!((w2_squared_sorted(&[0.0, 3.0], &[1.0, 1.0, 2.0]) - 1.5).abs() < 1e-12);
    }
}
