//! Task-driven selection of encoder layers from precomputed layer-wise embeddings.
//!
//! The crate scores each layer of a frozen encoder with a closed-form ridge
//! probe, combines the fit with spectral and geometric diagnostics (isotropy,
//! cross-layer redundancy, class-centroid triangle area) and greedily builds a
//! small complementary layer subset. Exhaustive and heuristic baselines, a
//! batch geometric regularizer, and numerical checks of the ridge
//! parameter-error decomposition ship alongside.
//!
//! Matrices are `nalgebra::DMatrix<f64>`; rows are samples, columns features.
// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod georeg;
pub mod io;
pub mod ridge;
pub mod selection;
pub mod spectral;
pub mod synth;
pub mod theory;

pub use error::{LoesError, Result};

/// Dense row-sample matrix used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;

/// Ordered per-layer embedding matrices sharing one sample axis.
#[derive(Debug, Clone)]
pub struct LayerStack {
    layers: Vec<Matrix>,
}

impl LayerStack {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        if let Some(first) = layers.first() {
            let n = first.nrows();
            for (i, layer) in layers.iter().enumerate() {
                if layer.nrows() != n {
                    return Err(LoesError::invalid(format!(
                        "layer {i} has {} rows, expected {n}",
                        layer.nrows()
                    )));
                }
                if layer.iter().any(|v| !v.is_finite()) {
                    return Err(LoesError::invalid(format!("layer {i} has non-finite entries")));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.layers.first().map_or(0, |l| l.nrows())
    }

    pub fn layer(&self, i: usize) -> &Matrix {
        &self.layers[i]
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Matrix> {
        self.layers
    }

    /// Restricts every layer to the given sample rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> LayerStack {
        LayerStack {
            layers: self.layers.iter().map(|l| l.select_rows(rows)).collect(),
        }
    }

    /// Column-concatenation of the listed layers.
    pub fn concat(&self, subset: &[usize]) -> Matrix {
        concat_columns(subset.iter().map(|&i| &self.layers[i]))
    }
}

/// Task supervision attached to a stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Integer class labels, one per sample.
    Labels(Vec<usize>),
    /// Real-valued multi-output targets, `n_samples × outputs`.
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select_rows(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Labels(l) => Targets::Labels(rows.iter().map(|&r| l[r]).collect()),
            Targets::Values(v) => Targets::Values(v.select_rows(rows)),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Labels(l) => Some(l),
            Targets::Values(_) => None,
        }
    }
}

pub(crate) fn concat_columns<'a>(mats: impl IntoIterator<Item = &'a Matrix>) -> Matrix {
    let mats: Vec<&Matrix> = mats.into_iter().collect();
    let rows = mats.first().map_or(0, |m| m.nrows());
    let cols: usize = mats.iter().map(|m| m.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut offset = 0;
    for m in mats {
        out.columns_mut(offset, m.ncols()).copy_from(m);
        offset += m.ncols();
    }
    out
}
