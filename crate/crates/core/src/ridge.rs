//! Closed-form multi-output ridge probes.
//!
//! The normal equations `(XᵀX + λI) W = XᵀY` are solved by Cholesky. When the
//! feature count exceeds the sample count the equivalent `N × N` system
//! `W = Xᵀ (XXᵀ + λI)⁻¹ Y` is used instead.

use nalgebra::{Cholesky, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::spectral::center_columns;
use crate::{LoesError, Matrix, Result};

/// Default ridge penalty.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RidgeSolver {
    /// Primal when `d <= N`, dual otherwise.
    #[default]
    Auto,
    Primal,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RidgeOptions {
    /// Center feature columns before fitting. Targets are never centered.
    pub center: bool,
    pub solver: RidgeSolver,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        Self {
            center: true,
            solver: RidgeSolver::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub weights: Matrix,
    pub lambda: f64,
    /// Feature means subtracted at fit time (zeros when centering is off).
    pub column_mean: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub mse: f64,
    /// Argmax accuracy, present only when class labels were supplied.
    pub accuracy: Option<f64>,
}

/// One-hot encodes labels into an `N × num_classes` matrix.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Matrix> {
    let mut y = Matrix::zeros(labels.len(), num_classes);
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(LoesError::InvalidLabel { label, num_classes });
        }
        y[(i, label)] = 1.0;
    }
    Ok(y)
}

pub fn ridge_fit(x: &Matrix, y: &Matrix, lambda: f64) -> Result<RidgeFit> {
    ridge_fit_with(x, y, lambda, RidgeOptions::default())
}

pub fn ridge_fit_with(x: &Matrix, y: &Matrix, lambda: f64, opts: RidgeOptions) -> Result<RidgeFit> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(LoesError::invalid(format!("lambda must be positive, got {lambda}")));
    }
    if x.nrows() != y.nrows() {
        return Err(LoesError::invalid(format!(
            "feature rows {} != target rows {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() == 0 {
        return Err(LoesError::invalid("cannot fit a probe on zero samples"));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(LoesError::invalid("non-finite value in probe inputs"));
    }
    let (xc, column_mean) = if opts.center {
        center_columns(x)?
    } else {
        (x.clone(), DVector::zeros(x.ncols()))
    };
    let dual = match opts.solver {
        RidgeSolver::Auto => xc.ncols() > xc.nrows(),
        RidgeSolver::Primal => false,
        RidgeSolver::Dual => true,
    };
    let weights = if dual {
        solve_dual(&xc, y, lambda)?
    } else {
        solve_primal(&xc, y, lambda)?
    };
    Ok(RidgeFit {
        weights,
        lambda,
        column_mean,
    })
}

fn regularized_cholesky(mut gram: Matrix, lambda: f64) -> Result<Cholesky<f64, Dyn>> {
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    Cholesky::new(gram)
        .ok_or_else(|| LoesError::NumericalFailure("regularized Gram matrix is not positive definite".into()))
}

fn solve_primal(xc: &Matrix, y: &Matrix, lambda: f64) -> Result<Matrix> {
    let chol = regularized_cholesky(xc.tr_mul(xc), lambda)?;
    Ok(chol.solve(&xc.tr_mul(y)))
}

fn solve_dual(xc: &Matrix, y: &Matrix, lambda: f64) -> Result<Matrix> {
    let chol = regularized_cholesky(xc * xc.transpose(), lambda)?;
    Ok(xc.tr_mul(&chol.solve(y)))
}

/// `(X - mean) W`.
pub fn ridge_predict(fit: &RidgeFit, x: &Matrix) -> Result<Matrix> {
    if x.ncols() != fit.weights.nrows() {
        return Err(LoesError::invalid(format!(
            "probe expects {} features, got {}",
            fit.weights.nrows(),
            x.ncols()
        )));
    }
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-fit.column_mean[j]);
    }
    Ok(xc * &fit.weights)
}

/// Row-wise argmax; ties resolve to the lowest column.
pub fn argmax_rows(pred: &Matrix) -> Vec<usize> {
    pred.row_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn mse(pred: &Matrix, y: &Matrix) -> f64 {
    let n = (pred.nrows() * pred.ncols()).max(1);
    (pred - y).norm_squared() / n as f64
}

pub fn probe_metrics(pred: &Matrix, y: &Matrix, labels: Option<&[usize]>) -> Result<ProbeMetrics> {
    if pred.shape() != y.shape() {
        return Err(LoesError::invalid(format!(
            "prediction shape {:?} != target shape {:?}",
            pred.shape(),
            y.shape()
        )));
    }
    let accuracy = match labels {
        None => None,
        Some(labels) => {
            if labels.len() != pred.nrows() {
                return Err(LoesError::invalid(format!(
                    "{} labels for {} predictions",
                    labels.len(),
                    pred.nrows()
                )));
            }
            Some(accuracy(&argmax_rows(pred), labels))
        }
    };
    Ok(ProbeMetrics {
        mse: mse(pred, y),
        accuracy,
    })
}

pub(crate) fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Training-set MSE of a centered ridge probe, the per-candidate fit loss.
pub fn in_sample_mse(x: &Matrix, y: &Matrix, lambda: f64) -> Result<f64> {
    let fit = ridge_fit(x, y, lambda)?;
    Ok(mse(&ridge_predict(&fit, x)?, y))
}
