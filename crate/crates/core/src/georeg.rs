//! Geometry regularizer: eigenvalue-variance penalty plus a log-area term on
//! class centroids, with a central-difference gradient for checking.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::CentroidSet;
use crate::spectral::{center_columns, covariance, mean_and_variance, sym_eigvals};
use crate::{LoesError, Matrix, Result};

pub const DEFAULT_LAMBDA_GEO: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-8;
/// Triplets drawn per batch.
pub const DEFAULT_TRIPLETS: usize = 1;
const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRegValue {
    pub iso_term: f64,
    pub area: f64,
    pub total: f64,
}

/// Population variance of the batch covariance eigenvalues.
pub fn georeg_iso(z: &Matrix) -> Result<f64> {
    if z.nrows() < 2 {
        return Err(LoesError::invalid(format!("batch of {} rows; need at least 2", z.nrows())));
    }
    let (zc, _) = center_columns(z)?;
    let mut cov = covariance(&zc)?;
    for i in 0..cov.nrows() {
        cov[(i, i)] += JITTER;
    }
    let eigs = sym_eigvals(&cov)?;
    Ok(mean_and_variance(&eigs).1.max(0.0))
}

/// Regularizer value with the default single triplet.
pub fn georeg_loss(z: &Matrix, labels: &[usize], lambda_geo: f64, eps: f64, seed: u64) -> Result<GeoRegValue> {
    georeg_loss_with(z, labels, lambda_geo, eps, seed, DEFAULT_TRIPLETS)
}

pub fn georeg_loss_with(
    z: &Matrix,
    labels: &[usize],
    lambda_geo: f64,
    eps: f64,
    seed: u64,
    n_triplets: usize,
) -> Result<GeoRegValue> {
    if !(lambda_geo >= 0.0) {
        return Err(LoesError::invalid("lambda_geo must be nonnegative"));
    }
    if !(eps > 0.0) {
        return Err(LoesError::invalid("eps must be positive"));
    }
    let iso_term = georeg_iso(z)?;
    let centroids = CentroidSet::compute(z, labels)?;
    if centroids.len() < 3 {
        return Ok(GeoRegValue {
            iso_term,
            area: 0.0,
            total: lambda_geo * iso_term,
        });
    }
    let area = centroids.mean_triangle_area(n_triplets.max(1), seed);
    Ok(GeoRegValue {
        iso_term,
        area,
        total: lambda_geo * (iso_term - (area + eps).ln()),
    })
}

/// Central-difference gradient of `total` with respect to every entry of `z`.
/// The triplet seed is fixed so every evaluation sees the same classes.
pub fn finite_diff_grad(z: &Matrix, labels: &[usize], lambda_geo: f64, eps: f64, step: f64) -> Result<Matrix> {
    finite_diff_grad_seeded(z, labels, lambda_geo, eps, step, 0)
}

pub fn finite_diff_grad_seeded(
    z: &Matrix,
    labels: &[usize],
    lambda_geo: f64,
    eps: f64,
    step: f64,
    seed: u64,
) -> Result<Matrix> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(LoesError::invalid("step must be positive"));
    }
    let (rows, cols) = z.shape();
    let eval = |i: usize, j: usize, h: f64| -> Result<f64> {
        let mut zp = z.clone();
        zp[(i, j)] += h;
        let v = georeg_loss(&zp, labels, lambda_geo, eps, seed)?.total;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(LoesError::NumericalFailure(format!("non-finite loss perturbing ({i}, {j})")))
        }
    };
    let grads: Vec<f64> = (0..rows * cols)
        .into_par_iter()
        .map(|idx| {
            // Column-major, matching nalgebra storage.
            let (i, j) = (idx % rows, idx / rows);
            Ok((eval(i, j, step)? - eval(i, j, -step)?) / (2.0 * step))
        })
        .collect::<Result<_>>()?;
    Ok(Matrix::from_vec(rows, cols, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six points, centroids (0,0), (1,0), (0,1), total covariance I/3.
    fn isotropic_batch() -> (Matrix, Vec<usize>) {
        let t = (2.0f64 / 9.0).sqrt() / std::f64::consts::SQRT_2;
        let centroids = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)];
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, &(x, y)) in centroids.iter().enumerate() {
            for s in [1.0, -1.0] {
                data.extend_from_slice(&[x + s * t, y + s * t]);
                labels.push(c);
            }
        }
        (Matrix::from_row_slice(6, 2, &data), labels)
    }

    fn anisotropic(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, j| rng.random_range(-1.0..1.0) / (1.0 + j as f64))
    }

    #[test]
    fn isotropic_batch_has_zero_iso_term() {
        let (z, _) = isotropic_batch();
        assert!(georeg_iso(&z).unwrap().abs() < 1e-10);
    }

    #[test]
    fn rank_one_two_dims() {
        // Eigenvalues {v, 0} with v = 1: variance 1/4.
        let z = Matrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        assert_relative_eq!(georeg_iso(&z).unwrap(), 0.25, epsilon = 1e-9);
    }

    #[test]
    fn single_row_is_rejected() {
        assert!(matches!(georeg_iso(&Matrix::zeros(1, 3)), Err(LoesError::InvalidInput(_))));
    }

    #[test]
    fn worked_value() {
        let (z, labels) = isotropic_batch();
        let v = georeg_loss(&z, &labels, 0.1, 1e-12, 0).unwrap();
        assert_relative_eq!(v.area, 0.5, epsilon = 1e-12);
        assert_relative_eq!(v.total, 0.1 * 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn two_classes_skip_area() {
        let z = anisotropic(10, 3, 4);
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let v = georeg_loss(&z, &labels, 0.3, 1e-8, 0).unwrap();
        assert_eq!(v.total, 0.3 * v.iso_term);
    }

    #[test]
    fn zero_weight_zero_gradient() {
        let z = anisotropic(12, 3, 5);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        assert_eq!(georeg_loss(&z, &labels, 0.0, 1e-8, 0).unwrap().total, 0.0);
        let g = finite_diff_grad(&z, &labels, 0.0, 1e-8, 1e-4).unwrap();
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn bad_step_is_rejected() {
        let z = anisotropic(6, 2, 1);
        assert!(finite_diff_grad(&z, &[0, 1, 2, 0, 1, 2], 0.1, 1e-8, 0.0).is_err());
    }

    #[test]
    fn gradient_step_lowers_loss() {
        let z = anisotropic(24, 4, 9);
        let labels: Vec<usize> = (0..24).map(|i| i % 4).collect();
        let before = georeg_loss(&z, &labels, 0.1, 1e-8, 0).unwrap().total;
        let g = finite_diff_grad(&z, &labels, 0.1, 1e-8, 1e-5).unwrap();
        let after = georeg_loss(&(z - g * 1e-2), &labels, 0.1, 1e-8, 0).unwrap().total;
        assert!(after < before);
    }
}
