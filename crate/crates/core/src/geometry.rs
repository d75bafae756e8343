//! Context orthogonalization, cross-layer redundancy and centroid triangle areas.

use std::collections::BTreeMap;

use nalgebra::{DVector, SVD};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::spectral::center_columns;
use crate::{LoesError, Matrix, Result};

/// Default ridge stabilizer for orthogonalization.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Default cap on the number of centroid triplets averaged.
pub const DEFAULT_TRIPLET_BUDGET: usize = 200;

/// How the selected context is removed from a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrthoMode {
    /// Center both blocks, project out, re-add the candidate's column means.
    #[default]
    Centered,
    /// Project raw (uncentered) features; kept for compatibility only.
    Uncentered,
}

/// Ridge-regularized projector onto the column span of a fixed context block.
///
/// Built once per greedy step and applied to every remaining candidate.
#[derive(Debug, Clone)]
pub struct ContextProjector {
    /// Left singular vectors of the (centered) context.
    basis: Matrix,
    /// `s² / (s² + ε)` per singular value.
    shrink: DVector<f64>,
    mode: OrthoMode,
    rows: usize,
}

impl ContextProjector {
    pub fn new(context: &Matrix, epsilon: f64, mode: OrthoMode) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(LoesError::invalid("epsilon must be positive"));
        }
        let rows = context.nrows();
        if rows == 0 {
            return Err(LoesError::invalid("context has zero rows"));
        }
        let ctx = match mode {
            OrthoMode::Centered => center_columns(context)?.0,
            OrthoMode::Uncentered => context.clone(),
        };
        if ctx.ncols() == 0 {
            return Ok(Self {
                basis: Matrix::zeros(rows, 0),
                shrink: DVector::zeros(0),
                mode,
                rows,
            });
        }
        let svd = SVD::try_new(ctx, true, false, f64::EPSILON, 0)
            .ok_or_else(|| LoesError::NumericalFailure("context SVD did not converge".into()))?;
        let basis = svd
            .u
            .ok_or_else(|| LoesError::NumericalFailure("context SVD returned no basis".into()))?;
        let shrink = svd.singular_values.map(|s| {
            let s2 = s * s;
            s2 / (s2 + epsilon)
        });
        Ok(Self {
            basis,
            shrink,
            mode,
            rows,
        })
    }

    pub fn apply(&self, candidate: &Matrix) -> Result<Matrix> {
        if candidate.nrows() != self.rows {
            return Err(LoesError::invalid(format!(
                "candidate has {} rows, context has {}",
                candidate.nrows(),
                self.rows
            )));
        }
        match self.mode {
            OrthoMode::Centered => {
                let (mut xc, mean) = center_columns(candidate)?;
                self.subtract_projection(&mut xc);
                for (j, mut col) in xc.column_iter_mut().enumerate() {
                    col.add_scalar_mut(mean[j]);
                }
                Ok(xc)
            }
            OrthoMode::Uncentered => {
                let mut x = candidate.clone();
                self.subtract_projection(&mut x);
                Ok(x)
            }
        }
    }

    fn subtract_projection(&self, x: &mut Matrix) {
        if self.shrink.is_empty() {
            return;
        }
        let mut coeffs = self.basis.tr_mul(x);
        for (i, mut row) in coeffs.row_iter_mut().enumerate() {
            row *= self.shrink[i];
        }
        x.gemm(-1.0, &self.basis, &coeffs, 1.0);
    }
}

/// Removes from `xl` the part explained by the span of `xs`, in the ridge sense.
pub fn orthogonalize(xl: &Matrix, xs: &Matrix, epsilon: f64) -> Result<Matrix> {
    orthogonalize_with(xl, xs, epsilon, OrthoMode::Centered)
}

pub fn orthogonalize_with(xl: &Matrix, xs: &Matrix, epsilon: f64, mode: OrthoMode) -> Result<Matrix> {
    if xl.nrows() != xs.nrows() {
        return Err(LoesError::invalid(format!(
            "candidate has {} rows, context has {}",
            xl.nrows(),
            xs.nrows()
        )));
    }
    ContextProjector::new(xs, epsilon, mode)?.apply(xl)
}

/// `‖AᵀB‖_F / sqrt(‖AᵀA‖_F ‖BᵀB‖_F)` on column-centered features.
///
/// Lies in `[0, 1]` by Cauchy–Schwarz on the Gram matrices `AAᵀ`, `BBᵀ`, and
/// equals 1 exactly when those Gram matrices are proportional.
pub fn frobenius_alignment(a: &Matrix, b: &Matrix) -> Result<f64> {
    let ac = center_columns(a)?.0;
    let bc = center_columns(b)?.0;
    let na = ac.tr_mul(&ac).norm();
    let nb = bc.tr_mul(&bc).norm();
    alignment_from_parts(&ac, &bc, na, nb)
}

pub(crate) fn alignment_from_parts(ac: &Matrix, bc: &Matrix, gram_a: f64, gram_b: f64) -> Result<f64> {
    if ac.nrows() != bc.nrows() {
        return Err(LoesError::invalid("alignment needs matching row counts"));
    }
    if gram_a <= 0.0 || gram_b <= 0.0 {
        return Err(LoesError::DegenerateInput("zero-norm feature block".into()));
    }
    let cross = ac.tr_mul(bc).norm();
    Ok((cross / (gram_a * gram_b).sqrt()).clamp(0.0, 1.0))
}

/// `‖AᵀB‖_F / (‖A‖_F ‖B‖_F)` on column-centered features.
///
/// This normalization only reaches 1 for rank-one blocks; it is exposed for
/// comparison and not used in scoring.
pub fn literal_alignment(a: &Matrix, b: &Matrix) -> Result<f64> {
    let ac = center_columns(a)?.0;
    let bc = center_columns(b)?.0;
    let denom = ac.norm() * bc.norm();
    if denom <= 0.0 {
        return Err(LoesError::DegenerateInput("zero-norm feature block".into()));
    }
    Ok(ac.tr_mul(&bc).norm() / denom)
}

/// Maximum alignment of `xl` against any selected block; 0 when none are selected.
pub fn redundancy(xl: &Matrix, selected: &[&Matrix]) -> Result<f64> {
    let mut best: f64 = 0.0;
    for xj in selected {
        best = best.max(frobenius_alignment(xl, xj)?);
    }
    Ok(best)
}

/// Area of the triangle `(a, b, c)` in any dimension.
pub fn triangle_area(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let mut uu = 0.0;
    let mut vv = 0.0;
    let mut uv = 0.0;
    for i in 0..a.len() {
        let u = b[i] - a[i];
        let v = c[i] - a[i];
        uu += u * u;
        vv += v * v;
        uv += u * v;
    }
    0.5 * (uu * vv - uv * uv).max(0.0).sqrt()
}

/// Per-class mean embedding, keyed by class id in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: BTreeMap<usize, Vec<f64>>,
}

impl CentroidSet {
    pub fn compute(x: &Matrix, labels: &[usize]) -> Result<Self> {
        if labels.len() != x.nrows() {
            return Err(LoesError::invalid(format!(
                "{} labels for {} rows",
                labels.len(),
                x.nrows()
            )));
        }
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (i, &label) in labels.iter().enumerate() {
            let entry = sums
                .entry(label)
                .or_insert_with(|| (vec![0.0; x.ncols()], 0));
            for (j, s) in entry.0.iter_mut().enumerate() {
                *s += x[(i, j)];
            }
            entry.1 += 1;
        }
        let centroids = sums
            .into_iter()
            .map(|(k, (sum, n))| (k, sum.into_iter().map(|s| s / n as f64).collect()))
            .collect();
        Ok(Self { centroids })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Mean triangle area over centroid triplets.
    ///
    /// All `C(C,3)` triplets are averaged when they fit in `n_triplets`;
    /// otherwise `n_triplets` uniformly drawn triplets of distinct classes are.
    /// Fewer than three classes gives 0.
    pub fn mean_triangle_area(&self, n_triplets: usize, seed: u64) -> f64 {
        let points: Vec<&Vec<f64>> = self.centroids.values().collect();
        let c = points.len();
        if c < 3 || n_triplets == 0 {
            return 0.0;
        }
        let total = c * (c - 1) * (c - 2) / 6;
        if total <= n_triplets {
            let mut sum = 0.0;
            for i in 0..c {
                for j in (i + 1)..c {
                    for k in (j + 1)..c {
                        sum += triangle_area(points[i], points[j], points[k]);
                    }
                }
            }
            return sum / total as f64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum = 0.0;
        for _ in 0..n_triplets {
            let idx = sample(&mut rng, c, 3);
            sum += triangle_area(points[idx.index(0)], points[idx.index(1)], points[idx.index(2)]);
        }
        sum / n_triplets as f64
    }
}

/// Default triplet budget for `c` classes: every triplet up to 200.
pub fn default_triplet_budget(classes: usize) -> usize {
    let total = if classes < 3 {
        0
    } else {
        classes * (classes - 1) * (classes - 2) / 6
    };
    total.min(DEFAULT_TRIPLET_BUDGET)
}

/// Average centroid triangle area of `x` grouped by `labels`.
pub fn triangle_score(x: &Matrix, labels: &[usize], n_triplets: usize, seed: u64) -> Result<f64> {
    Ok(CentroidSet::compute(x, labels)?.mean_triangle_area(n_triplets, seed))
}
