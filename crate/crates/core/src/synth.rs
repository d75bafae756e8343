//! Seeded layer stacks with planted class signal, anisotropy and redundancy.
//!
//! Every non-copy layer starts as spherical unit noise passed through
//! `diag(j^(-a/2)) · Q` (normalized to keep the trace at `dim`), so the noise
//! covariance spectrum decays like `j^(-a)` and the average noise variance per
//! coordinate stays 1. Signal layers then add class-dependent means placed on
//! a regular simplex whose edge is the requested separation, in units of that
//! average noise standard deviation. A redundant layer is its source plus
//! scaled spherical noise.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{LayerStack, LoesError, Matrix, Result};

/// Spectral decay exponent applied to layers that do not set their own.
pub const DEFAULT_ANISOTROPY: f64 = 2.0;

/// How class identity is spread over the signal layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalMode {
    /// Class ids are written in base `b` (smallest `b` with `b^S >= C` for `S`
    /// signal layers); signal layer `s` separates the classes by digit
    /// `s mod digits`. One signal layer therefore carries every class, and
    /// several signal layers are complementary.
    #[default]
    Factorized,
    /// Every signal layer separates all classes.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundantLayer {
    pub layer: usize,
    pub source: usize,
    /// Standard deviation of the spherical noise added to the source copy.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub n_layers: usize,
    pub n_samples: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub signal_layers: Vec<usize>,
    pub signal_strength: f64,
    #[serde(default)]
    pub redundancy: Vec<RedundantLayer>,
    /// Per-layer decay exponents; empty means [`DEFAULT_ANISOTROPY`] everywhere.
    #[serde(default)]
    pub anisotropy: Vec<f64>,
    #[serde(default)]
    pub signal_mode: SignalMode,
    #[serde(default)]
    pub seed: u64,
}

impl PlantedSpec {
    pub fn new(
        n_layers: usize,
        n_samples: usize,
        dim: usize,
        n_classes: usize,
        signal_layers: Vec<usize>,
        signal_strength: f64,
        seed: u64,
    ) -> Self {
        Self {
            n_layers,
            n_samples,
            dim,
            n_classes,
            signal_layers,
            signal_strength,
            redundancy: Vec::new(),
            anisotropy: Vec::new(),
            signal_mode: SignalMode::default(),
            seed,
        }
    }

    pub fn anisotropy_of(&self, layer: usize) -> f64 {
        self.anisotropy.get(layer).copied().unwrap_or(DEFAULT_ANISOTROPY)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_samples == 0 || self.dim == 0 {
            return Err(LoesError::invalid("layers, samples and dim must be positive"));
        }
        if self.n_classes < 2 {
            return Err(LoesError::invalid("need at least two classes"));
        }
        if !(self.signal_strength >= 0.0) || !self.signal_strength.is_finite() {
            return Err(LoesError::invalid("signal_strength must be nonnegative"));
        }
        let signal: BTreeSet<usize> = self.signal_layers.iter().copied().collect();
        if signal.len() != self.signal_layers.len() {
            return Err(LoesError::invalid("duplicate signal layer"));
        }
        if signal.iter().any(|&l| l >= self.n_layers) {
            return Err(LoesError::invalid("signal layer out of range"));
        }
        if !self.anisotropy.is_empty() && self.anisotropy.len() != self.n_layers {
            return Err(LoesError::invalid("anisotropy must list one exponent per layer"));
        }
        if self.anisotropy.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(LoesError::invalid("anisotropy exponents must be nonnegative"));
        }
        let mut copies = BTreeSet::new();
        for r in &self.redundancy {
            if r.layer >= self.n_layers || r.source >= r.layer {
                return Err(LoesError::invalid(format!(
                    "redundant layer {} must follow its source {}",
                    r.layer, r.source
                )));
            }
            if signal.contains(&r.layer) {
                return Err(LoesError::invalid("a redundant copy cannot also be a signal layer"));
            }
            if !copies.insert(r.layer) {
                return Err(LoesError::invalid("layer listed twice as a copy"));
            }
            if !(r.noise >= 0.0) {
                return Err(LoesError::invalid("copy noise must be nonnegative"));
            }
        }
        let groups = self.groups_per_layer();
        if groups > self.dim + 1 {
            return Err(LoesError::invalid("dim too small to place the class simplex"));
        }
        Ok(())
    }

    fn groups_per_layer(&self) -> usize {
        match self.signal_mode {
            SignalMode::Full => self.n_classes,
            SignalMode::Factorized => factor_base(self.n_classes, self.signal_layers.len().max(1)),
        }
    }

    fn digits(&self) -> usize {
        let base = self.groups_per_layer();
        let mut digits = 1;
        let mut span = base;
        while span < self.n_classes {
            span *= base;
            digits += 1;
        }
        digits
    }

    /// Group of class `c` in the signal layer ranked `rank` among signal layers.
    fn group_of(&self, c: usize, rank: usize) -> usize {
        match self.signal_mode {
            SignalMode::Full => c,
            SignalMode::Factorized => {
                let base = self.groups_per_layer();
                let digit = rank % self.digits();
                (c / base.pow(digit as u32)) % base
            }
        }
    }
}

/// Smallest `b >= 2` with `b^s >= c`.
fn factor_base(c: usize, s: usize) -> usize {
    let mut b = 2;
    while (b as f64).powi(s as i32) < c as f64 {
        b += 1;
    }
    b
}

#[derive(Debug, Clone)]
pub struct PlantedData {
    pub stack: LayerStack,
    pub labels: Vec<usize>,
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = gaussian(rows, cols, rng);
    let qr = g.qr();
    let mut q = qr.q();
    // Fix column signs so the distribution is Haar.
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `b` points in `dim` dimensions with all pairwise distances equal to `edge`.
fn simplex_vertices(b: usize, dim: usize, edge: f64, rng: &mut ChaCha8Rng) -> Matrix {
    // Standard basis vectors in R^b are pairwise sqrt(2) apart.
    let mut verts = Matrix::identity(b, b) * (edge / std::f64::consts::SQRT_2);
    let centroid = verts.row_mean();
    for mut row in verts.row_iter_mut() {
        row -= &centroid;
    }
    // The centered simplex spans b-1 dims; rotate it into a random subspace.
    let (_, _, v_t) = {
        let svd = verts.clone().svd(false, true);
        (svd.u, svd.singular_values, svd.v_t.expect("requested V"))
    };
    let k = b - 1;
    let coords = &verts * v_t.rows(0, k).transpose();
    let basis = random_orthonormal(dim, k, rng);
    coords * basis.transpose()
}

/// Trace-preserving map with spectrum `j^(-exponent)` followed by a random rotation.
fn shaping_map(dim: usize, exponent: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let raw: Vec<f64> = (1..=dim).map(|j| (j as f64).powf(-exponent)).collect();
    let mean = raw.iter().sum::<f64>() / dim as f64;
    let scales = DVector::from_iterator(dim, raw.iter().map(|v| (v / mean).sqrt()));
    let q = random_orthonormal(dim, dim, rng);
    Matrix::from_diagonal(&scales) * q
}

pub fn generate(spec: &PlantedSpec) -> Result<PlantedData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_samples;
    let d = spec.dim;

    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);

    let signal_rank: Vec<Option<usize>> = (0..spec.n_layers)
        .map(|l| spec.signal_layers.iter().position(|&s| s == l))
        .collect();
    let copy_of: Vec<Option<&RedundantLayer>> = (0..spec.n_layers)
        .map(|l| spec.redundancy.iter().find(|r| r.layer == l))
        .collect();

    let groups = spec.groups_per_layer();
    let mut layers: Vec<Matrix> = Vec::with_capacity(spec.n_layers);
    for l in 0..spec.n_layers {
        if let Some(copy) = copy_of[l] {
            let noise = gaussian(n, d, &mut rng) * copy.noise;
            layers.push(&layers[copy.source] + noise);
            continue;
        }
        let map = shaping_map(d, spec.anisotropy_of(l), &mut rng);
        let mut x = gaussian(n, d, &mut rng) * map;
        if let Some(rank) = signal_rank[l] {
            let means = simplex_vertices(groups, d, spec.signal_strength, &mut rng);
            for (i, &c) in labels.iter().enumerate() {
                let g = spec.group_of(c, rank);
                let mut row = x.row_mut(i);
                row += means.row(g);
            }
        }
        layers.push(x);
    }
    Ok(PlantedData {
        stack: LayerStack::new(layers)?,
        labels,
    })
}
