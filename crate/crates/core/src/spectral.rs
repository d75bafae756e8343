//! Centering, covariance spectra and the isotropy / effective-rank diagnostics.

use nalgebra::{DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{LoesError, Matrix, Result};

/// Default stabilizer added to the eigenvalue variance in the isotropy score.
pub const DEFAULT_DELTA: f64 = 1e-8;

/// Eigenvalues below this fraction of the largest are treated as zero for
/// effective rank.
const RANK_CLAMP: f64 = 1e-12;

/// Covariance eigenvalues of a layer and the summary statistics derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    pub mean_eig: f64,
    /// Population variance of the eigenvalues.
    pub eig_variance: f64,
    pub isotropy: f64,
    pub effective_rank: f64,
}

/// Subtracts the per-column mean. Returns the centered matrix and the means.
pub fn center_columns(x: &Matrix) -> Result<(Matrix, DVector<f64>)> {
    if x.nrows() == 0 {
        return Err(LoesError::invalid("cannot center a matrix with zero rows"));
    }
    let mean = x.row_mean().transpose();
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    Ok((xc, mean))
}

/// `(1/N) XcᵀXc` for an already-centered matrix.
pub fn covariance(xc: &Matrix) -> Result<Matrix> {
    let n = xc.nrows();
    if n == 0 {
        return Err(LoesError::invalid("covariance of a matrix with zero rows"));
    }
    let mut cov = xc.tr_mul(xc);
    cov /= n as f64;
    symmetrize(&mut cov);
    Ok(cov)
}

pub(crate) fn symmetrize(s: &mut Matrix) {
    let d = s.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
}

/// Eigenvalues of a symmetric matrix in descending order.
pub fn sym_eigvals(s: &Matrix) -> Result<Vec<f64>> {
    check_symmetric(s)?;
    let mut eigs: Vec<f64> = SymmetricEigen::new(s.clone()).eigenvalues.iter().copied().collect();
    eigs.sort_by(|a, b| b.total_cmp(a));
    Ok(eigs)
}

fn check_symmetric(s: &Matrix) -> Result<()> {
    if !s.is_square() {
        return Err(LoesError::invalid(format!(
            "expected a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(LoesError::invalid("matrix has non-finite entries"));
    }
    let scale = s.amax().max(1.0);
    let d = s.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            if (s[(i, j)] - s[(j, i)]).abs() > 1e-9 * scale {
                return Err(LoesError::invalid(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Descending covariance eigenvalues of `x` after column centering, clamped at zero.
pub fn covariance_spectrum(x: &Matrix) -> Result<Vec<f64>> {
    let (xc, _) = center_columns(x)?;
    let cov = covariance(&xc)?;
    Ok(sym_eigvals(&cov)?.into_iter().map(|v| v.max(0.0)).collect())
}

/// Mean and population variance of a list of eigenvalues.
pub fn mean_and_variance(eigs: &[f64]) -> (f64, f64) {
    if eigs.is_empty() {
        return (0.0, 0.0);
    }
    let d = eigs.len() as f64;
    let mean = eigs.iter().sum::<f64>() / d;
    let var = eigs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / d;
    (mean, var)
}

/// `mean / sqrt(var + delta)` over a precomputed spectrum.
pub fn isotropy_from_spectrum(eigs: &[f64], delta: f64) -> f64 {
    let (mean, var) = mean_and_variance(eigs);
    mean / (var + delta).sqrt()
}

/// Isotropy of the column-centered covariance of `x`.
///
/// High values mean a flat spectrum: a perfectly isotropic `c·I` covariance
/// scores `c / sqrt(delta)`.
pub fn isotropy_score(x: &Matrix, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(LoesError::invalid("delta must be positive"));
    }
    if x.nrows() == 0 {
        return Err(LoesError::invalid("isotropy of a matrix with zero rows"));
    }
    Ok(isotropy_from_spectrum(&covariance_spectrum(x)?, delta))
}

/// Exponentiated Shannon entropy of the normalized spectrum.
pub fn effective_rank(eigs: &[f64]) -> Result<f64> {
    if eigs.iter().any(|&e| !e.is_finite() || e < -1e-10) {
        return Err(LoesError::invalid("eigenvalues must be finite and nonnegative"));
    }
    let max = eigs.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return Err(LoesError::DegenerateSpectrum("all eigenvalues are zero".into()));
    }
    let floor = RANK_CLAMP * max;
    let kept: Vec<f64> = eigs.iter().map(|&e| if e < floor { 0.0 } else { e }).collect();
    let total: f64 = kept.iter().sum();
    let entropy: f64 = kept
        .iter()
        .filter(|&&e| e > 0.0)
        .map(|&e| {
            let p = e / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp().clamp(1.0, eigs.len() as f64))
}

/// Full spectral summary of one layer.
pub fn spectrum_report(x: &Matrix, delta: f64) -> Result<SpectrumReport> {
    let eigenvalues = covariance_spectrum(x)?;
    let (mean_eig, eig_variance) = mean_and_variance(&eigenvalues);
    let effective_rank = effective_rank(&eigenvalues).unwrap_or(0.0);
    Ok(SpectrumReport {
        isotropy: mean_eig / (eig_variance + delta).sqrt(),
        eigenvalues,
        mean_eig,
        eig_variance,
        effective_rank,
    })
}
