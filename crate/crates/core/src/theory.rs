//! Closed-form ridge parameter error under a spherical task prior, a Monte
//! Carlo sampler for it, and the convexity gap behind isotropy optimality.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{LoesError, Matrix, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Covariance eigenvalues.
    pub spectrum: Vec<f64>,
    pub lambda: f64,
    /// Expected squared norm of the true weights.
    pub prior_radius_sq: f64,
    pub noise_var: f64,
    pub dim: usize,
}

impl TheoryParams {
    pub fn new(spectrum: Vec<f64>, lambda: f64, prior_radius_sq: f64, noise_var: f64) -> Result<Self> {
        let p = Self {
            dim: spectrum.len(),
            spectrum,
            lambda,
            prior_radius_sq,
            noise_var,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.spectrum.len() != self.dim {
            return Err(LoesError::invalid("spectrum length must equal dim > 0"));
        }
        if self.spectrum.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(LoesError::invalid("spectrum must be finite and nonnegative"));
        }
        if !(self.lambda > 0.0) || !(self.prior_radius_sq > 0.0) || !(self.noise_var >= 0.0) {
            return Err(LoesError::invalid("need lambda > 0, R^2 > 0, noise variance >= 0"));
        }
        Ok(())
    }

    pub fn trace(&self) -> f64 {
        self.spectrum.iter().sum()
    }
}

/// `sum_i (R²/d) λ² / (μ_i + λ)²`.
pub fn alignment_bias(p: &TheoryParams) -> f64 {
    let scale = p.prior_radius_sq / p.dim as f64;
    p.spectrum
        .iter()
        .map(|&m| scale * p.lambda * p.lambda / (m + p.lambda).powi(2))
        .sum()
}

/// `sum_i σ² μ_i / (μ_i + λ)²`.
pub fn estimation_variance(p: &TheoryParams) -> f64 {
    p.spectrum
        .iter()
        .map(|&m| p.noise_var * m / (m + p.lambda).powi(2))
        .sum()
}

/// `sum_i 1/(μ_i+λ)² − d/(E/d+λ)²`; nonnegative by convexity, zero for a flat spectrum.
pub fn jensen_gap(spectrum: &[f64], lambda: f64) -> f64 {
    let d = spectrum.len() as f64;
    if spectrum.is_empty() {
        return 0.0;
    }
    let mean = spectrum.iter().sum::<f64>() / d;
    let lhs: f64 = spectrum.iter().map(|&m| 1.0 / (m + lambda).powi(2)).sum();
    lhs - d / (mean + lambda).powi(2)
}

/// Normalized exponentials scaled to `trace`.
pub fn random_spectrum(dim: usize, trace: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..dim).map(|_| Exp1.sample(&mut rng)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v * trace / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Ridge solved from the exact covariance and a noisy exact cross-covariance.
    #[default]
    Population,
    /// Ridge fit on `n_cal` Gaussian samples; only approximates the closed form.
    FiniteSample,
}

/// Mean and standard error of `‖ŵ − w*‖²` over `trials` draws of `w*`.
pub fn monte_carlo_param_error(
    p: &TheoryParams,
    n_cal: usize,
    trials: usize,
    seed: u64,
    mode: ErrorMode,
) -> Result<(f64, f64)> {
    p.validate()?;
    if trials < 100 {
        return Err(LoesError::invalid("need at least 100 trials"));
    }
    if mode == ErrorMode::FiniteSample && n_cal == 0 {
        return Err(LoesError::invalid("finite-sample mode needs n_cal > 0"));
    }
    let errors: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            match mode {
                ErrorMode::Population => population_trial(p, &mut rng),
                ErrorMode::FiniteSample => sample_trial(p, n_cal, &mut rng),
            }
        })
        .collect::<Result<_>>()?;
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

fn prior_draw(p: &TheoryParams, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let sd = (p.prior_radius_sq / p.dim as f64).sqrt();
    DVector::from_fn(p.dim, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

// The covariance is taken diagonal; the prior is rotation invariant so the
// eigenbasis does not matter.
fn population_trial(p: &TheoryParams, rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = prior_draw(p, rng);
    let sigma = p.noise_var.sqrt();
    let mut err = 0.0;
    for (i, &m) in p.spectrum.iter().enumerate() {
        let z: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
        let cross = m * w[i] + m.sqrt() * z;
        let w_hat = cross / (m + p.lambda);
        err += (w_hat - w[i]).powi(2);
    }
    Ok(err)
}

fn sample_trial(p: &TheoryParams, n: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = prior_draw(p, rng);
    let scales: Vec<f64> = p.spectrum.iter().map(|m| m.sqrt()).collect();
    let x = Matrix::from_fn(n, p.dim, |_, j| scales[j] * rng.sample::<f64, _>(StandardNormal));
    // Per-sample noise variance σ²·n makes Xᵀe/n match the population noise term.
    let noise_sd = (p.noise_var * n as f64).sqrt();
    let e = DVector::from_fn(n, |_, _| noise_sd * rng.sample::<f64, _>(StandardNormal));
    let y = &x * &w + e;
    let mut gram = x.tr_mul(&x) / n as f64;
    for i in 0..p.dim {
        gram[(i, i)] += p.lambda;
    }
    let rhs = x.tr_mul(&y) / n as f64;
    let w_hat = gram
        .cholesky()
        .ok_or_else(|| LoesError::NumericalFailure("ridge system not positive definite".into()))?
        .solve(&rhs);
    Ok((w_hat - w).norm_squared())
}
