//! Greedy layer selection.
//!
//! The first layer minimizes raw ridge loss plus the anisotropy penalty. Each
//! later step orthogonalizes every remaining layer against the selected
//! context, fits it to the current residual and ranks candidates by
//!
//! ```text
//! loss + alpha * (1 - iso) + gamma * red - eta * tri
//! ```
//!
//! Isotropy and redundancy are measured on raw features; loss and triangle
//! area on the orthogonalized ones. By default the orthogonalized features are
//! updated in place: after each pick, every remaining layer is residualized
//! against the newest layer's own residualized block, which keeps the cost of
//! a step independent of how many layers are already selected. With a small
//! `epsilon` this matches projecting against the whole concatenated context;
//! [`ContextUpdate::Joint`] does the latter literally. The winner is refit on its raw features
//! against the full targets and its prediction is added to the running
//! ensemble.

use std::collections::BTreeSet;

use log::warn;
use nalgebra::DVector;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    alignment_from_parts, default_triplet_budget, redundancy, triangle_score, ContextProjector,
    OrthoMode, DEFAULT_EPSILON,
};
use crate::ridge::{in_sample_mse, mse, one_hot, ridge_fit, ridge_predict, DEFAULT_LAMBDA};
use crate::spectral::{center_columns, isotropy_score, DEFAULT_DELTA};
use crate::{concat_columns, LayerStack, LoesError, Matrix, Result, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Classification,
    Regression,
    Dense,
}

impl TaskMode {
    pub fn uses_triangle(self) -> bool {
        matches!(self, TaskMode::Classification)
    }
}

impl std::str::FromStr for TaskMode {
    type Err = LoesError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskMode::Classification),
            "regression" => Ok(TaskMode::Regression),
            "dense" => Ok(TaskMode::Dense),
            other => Err(LoesError::invalid(format!("unknown task mode '{other}'"))),
        }
    }
}

/// Selection hyperparameters. Serialized verbatim into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoesConfig {
    pub k: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub eta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub cal_fraction: f64,
    pub seed: u64,
    pub task: TaskMode,
    /// Centroid-triplet budget; `None` means every triplet up to 200.
    pub n_triplets: Option<usize>,
    pub ortho_mode: OrthoModeSetting,
    #[serde(default)]
    pub context_update: ContextUpdate,
}

/// How remaining candidates are orthogonalized after each pick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextUpdate {
    /// Residualize against the newest selected block only (block Gram-Schmidt).
    #[default]
    Sequential,
    /// Re-project every candidate against all selected layers concatenated.
    Joint,
}

/// Serializable mirror of [`OrthoMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrthoModeSetting {
    #[default]
    Centered,
    Uncentered,
}

impl From<OrthoModeSetting> for OrthoMode {
    fn from(m: OrthoModeSetting) -> Self {
        match m {
            OrthoModeSetting::Centered => OrthoMode::Centered,
            OrthoModeSetting::Uncentered => OrthoMode::Uncentered,
        }
    }
}

impl Default for LoesConfig {
    fn default() -> Self {
        Self::for_task(TaskMode::Classification)
    }
}

impl LoesConfig {
    /// Protocol defaults: k=4, alpha=1, gamma=0.5, eta=0.1 (0 outside
    /// classification), lambda=1e-3, 20% calibration split, seed 0.
    pub fn for_task(task: TaskMode) -> Self {
        Self {
            k: 4,
            alpha: 1.0,
            gamma: 0.5,
            eta: if task.uses_triangle() { 0.1 } else { 0.0 },
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            delta: DEFAULT_DELTA,
            cal_fraction: 0.2,
            seed: 0,
            task,
            n_triplets: None,
            ortho_mode: OrthoModeSetting::Centered,
            context_update: ContextUpdate::Sequential,
        }
    }

    /// Checks ranges and zeroes `eta` for regression and dense tasks.
    pub fn validated(&self) -> Result<Self> {
        let mut cfg = self.clone();
        if cfg.k == 0 {
            return Err(LoesError::invalid("k must be at least 1"));
        }
        for (name, v) in [("alpha", cfg.alpha), ("gamma", cfg.gamma), ("eta", cfg.eta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LoesError::invalid(format!("{name} must be a nonnegative number")));
            }
        }
        for (name, v) in [("lambda", cfg.lambda), ("epsilon", cfg.epsilon), ("delta", cfg.delta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(LoesError::invalid(format!("{name} must be positive")));
            }
        }
        if !(cfg.cal_fraction > 0.0 && cfg.cal_fraction <= 1.0) {
            return Err(LoesError::invalid("cal_fraction must lie in (0, 1]"));
        }
        if !cfg.task.uses_triangle() {
            cfg.eta = 0.0;
        }
        Ok(cfg)
    }

    fn triplet_budget(&self, classes: usize) -> usize {
        self.n_triplets.unwrap_or_else(|| default_triplet_budget(classes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub loss: f64,
    pub isotropy: f64,
    pub redundancy: f64,
    pub triangle: f64,
    pub composite: f64,
}

impl LayerScore {
    pub fn assemble(layer: usize, loss: f64, isotropy: f64, redundancy: f64, triangle: f64, cfg: &LoesConfig) -> Self {
        let composite = loss + cfg.alpha * (1.0 - isotropy) + cfg.gamma * redundancy - cfg.eta * triangle;
        Self {
            layer,
            loss,
            isotropy,
            redundancy,
            triangle,
            composite,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub chosen: LayerScore,
    pub candidates: Vec<LayerScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub config: LoesConfig,
    pub selected: Vec<usize>,
    pub steps: Vec<SelectionStep>,
    /// Training MSE of the residual after each accepted layer.
    pub cumulative_mse_trace: Vec<f64>,
    /// Set when `k` exceeded the number of layers and was reduced.
    pub k_clamped: bool,
    pub n_layers: usize,
    pub n_calibration: usize,
    /// Calibration rows used for scoring, ascending.
    pub calibration_indices: Vec<usize>,
    /// Class ids seen in calibration, ascending; empty for regression.
    pub classes: Vec<usize>,
    /// Class ids present in the full data but absent from calibration.
    pub unseen_classes: Vec<usize>,
}

/// `ceil(fraction * n)` distinct row indices drawn uniformly, returned ascending.
pub fn calibration_split(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(LoesError::invalid("cannot split zero samples"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(LoesError::invalid("calibration fraction must lie in (0, 1]"));
    }
    let m = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Rows not in `calibration`, ascending.
pub fn complement(n: usize, calibration: &[usize]) -> Vec<usize> {
    let taken: BTreeSet<usize> = calibration.iter().copied().collect();
    (0..n).filter(|i| !taken.contains(i)).collect()
}

/// Regression matrix plus, for class tasks, labels re-indexed to `0..C`.
#[derive(Debug, Clone)]
pub struct EncodedTargets {
    pub y: Matrix,
    pub class_index: Option<Vec<usize>>,
    pub classes: Vec<usize>,
}

impl EncodedTargets {
    /// One-hot over the classes present in `targets`, ascending by label.
    pub fn encode(targets: &Targets) -> Result<Self> {
        match targets {
            Targets::Values(v) => Ok(Self {
                y: v.clone(),
                class_index: None,
                classes: Vec::new(),
            }),
            Targets::Labels(labels) => {
                let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
                Self::encode_with_classes(labels, &classes)
            }
        }
    }

    /// One-hot over a fixed class list; labels outside it are rejected.
    pub fn encode_with_classes(labels: &[usize], classes: &[usize]) -> Result<Self> {
        let mut index = Vec::with_capacity(labels.len());
        for &l in labels {
            let pos = classes
                .binary_search(&l)
                .map_err(|_| LoesError::InvalidLabel {
                    label: l,
                    num_classes: classes.len(),
                })?;
            index.push(pos);
        }
        Ok(Self {
            y: one_hot(&index, classes.len())?,
            class_index: Some(index),
            classes: classes.to_vec(),
        })
    }
}

fn triplet_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn argmin(scores: &[LayerScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if !(s.composite < scores[b].composite) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Stage-one score of every layer on raw features against the full targets.
pub fn initial_scores(stack: &LayerStack, y: &Matrix, cfg: &LoesConfig) -> Result<Vec<LayerScore>> {
    (0..stack.len())
        .into_par_iter()
        .map(|l| {
            let x = stack.layer(l);
            let loss = in_sample_mse(x, y, cfg.lambda)?;
            let iso = isotropy_score(x, cfg.delta)?;
            Ok(LayerScore::assemble(l, loss, iso, 0.0, 0.0, cfg))
        })
        .collect()
}

/// The stage-one winner: minimal raw ridge loss plus anisotropy penalty.
pub fn initial_select(stack: &LayerStack, y: &Matrix, cfg: &LoesConfig) -> Result<LayerScore> {
    if stack.is_empty() {
        return Err(LoesError::invalid("layer stack is empty"));
    }
    let scores = initial_scores(stack, y, cfg)?;
    let best = argmin(&scores).ok_or_else(|| LoesError::invalid("no layer could be scored"))?;
    Ok(scores[best].clone())
}

/// Scores one candidate from scratch against the selected context.
///
/// `selected_concat` is the column-concatenation of the raw selected layers,
/// `residual` the current `Y - Ŷ`, and `labels` the class index per row (only
/// used for classification).
pub fn candidate_score(
    layer: usize,
    xl: &Matrix,
    selected_concat: &Matrix,
    residual: &Matrix,
    selected_raw: &[&Matrix],
    labels: Option<&[usize]>,
    cfg: &LoesConfig,
) -> Result<LayerScore> {
    let orth = crate::geometry::orthogonalize_with(xl, selected_concat, cfg.epsilon, cfg.ortho_mode.into())?;
    let loss = in_sample_mse(&orth, residual, cfg.lambda)?;
    let iso = isotropy_score(xl, cfg.delta)?;
    let red = redundancy(xl, selected_raw)?;
    let tri = match (cfg.task.uses_triangle(), labels) {
        (true, Some(labels)) => {
            let classes = labels.iter().collect::<BTreeSet<_>>().len();
            triangle_score(&orth, labels, cfg.triplet_budget(classes), triplet_seed(cfg.seed, layer))?
        }
        _ => 0.0,
    };
    Ok(LayerScore::assemble(layer, loss, iso, red, tri, cfg))
}

/// Per-layer quantities that do not depend on the selected set.
struct LayerCache {
    centered: Vec<Matrix>,
    gram_norm: Vec<f64>,
    isotropy: Vec<f64>,
}

impl LayerCache {
    fn build(stack: &LayerStack, delta: f64) -> Result<Self> {
        let parts: Vec<(Matrix, f64, f64)> = stack
            .layers()
            .par_iter()
            .map(|x| {
                let (xc, _) = center_columns(x)?;
                let gram = xc.tr_mul(&xc).norm();
                let iso = isotropy_score(x, delta)?;
                Ok((xc, gram, iso))
            })
            .collect::<Result<_>>()?;
        let mut cache = LayerCache {
            centered: Vec::with_capacity(parts.len()),
            gram_norm: Vec::with_capacity(parts.len()),
            isotropy: Vec::with_capacity(parts.len()),
        };
        for (xc, g, iso) in parts {
            cache.centered.push(xc);
            cache.gram_norm.push(g);
            cache.isotropy.push(iso);
        }
        Ok(cache)
    }

    fn alignment(&self, a: usize, b: usize) -> Result<f64> {
        alignment_from_parts(&self.centered[a], &self.centered[b], self.gram_norm[a], self.gram_norm[b])
    }
}

/// Runs the greedy selection on every row of `stack` (no calibration split).
pub fn select_layers(stack: &LayerStack, targets: &Targets, cfg: &LoesConfig) -> Result<SelectionResult> {
    let cfg = cfg.validated()?;
    if stack.is_empty() {
        return Err(LoesError::invalid("layer stack is empty"));
    }
    if targets.len() != stack.n_samples() {
        return Err(LoesError::invalid(format!(
            "{} targets for {} samples",
            targets.len(),
            stack.n_samples()
        )));
    }
    if matches!(targets, Targets::Values(_)) && cfg.task != TaskMode::Regression {
        return Err(LoesError::invalid("real-valued targets require the regression task"));
    }
    let encoded = EncodedTargets::encode(targets)?;
    let y = &encoded.y;
    let labels = encoded.class_index.as_deref();
    let n_layers = stack.len();
    let k_clamped = cfg.k > n_layers;
    if k_clamped {
        warn!("k={} exceeds {} layers; clamping", cfg.k, n_layers);
    }
    let k = cfg.k.min(n_layers);
    let n_classes = encoded.classes.len();
    let budget = cfg.triplet_budget(n_classes);

    let cache = LayerCache::build(stack, cfg.delta)?;

    let first_scores: Vec<LayerScore> = (0..n_layers)
        .into_par_iter()
        .map(|l| {
            let loss = in_sample_mse(stack.layer(l), y, cfg.lambda)?;
            Ok(LayerScore::assemble(l, loss, cache.isotropy[l], 0.0, 0.0, &cfg))
        })
        .collect::<Result<_>>()?;
    let first = argmin(&first_scores).expect("nonempty stack");
    let chosen = first_scores[first].clone();

    let mut selected = vec![chosen.layer];
    let mut steps = vec![SelectionStep {
        chosen,
        candidates: first_scores,
    }];
    let mut y_hat = Matrix::zeros(y.nrows(), y.ncols());
    let mut trace = Vec::with_capacity(k);
    let mut residual = accumulate(stack.layer(selected[0]), y, &mut y_hat, cfg.lambda)?;
    trace.push(mse(&residual, &Matrix::zeros(y.nrows(), y.ncols())));

    // Running max alignment of each layer against the selected set.
    let mut red = vec![0.0_f64; n_layers];
    // Sequential mode: each layer's features with the selected blocks removed so far.
    let mut work: Vec<Matrix> = match cfg.context_update {
        ContextUpdate::Sequential => stack.layers().to_vec(),
        ContextUpdate::Joint => Vec::new(),
    };
    let mode: OrthoMode = cfg.ortho_mode.into();

    while selected.len() < k {
        let newest = *selected.last().expect("nonempty selection");
        let remaining: Vec<usize> = (0..n_layers).filter(|l| !selected.contains(l)).collect();
        let updates: Vec<f64> = remaining
            .par_iter()
            .map(|&l| cache.alignment(l, newest))
            .collect::<Result<_>>()?;
        for (&l, a) in remaining.iter().zip(updates) {
            red[l] = red[l].max(a);
        }

        let projector = match cfg.context_update {
            ContextUpdate::Sequential => ContextProjector::new(&work[newest], cfg.epsilon, mode)?,
            ContextUpdate::Joint => {
                let context = concat_columns(selected.iter().map(|&s| stack.layer(s)));
                ContextProjector::new(&context, cfg.epsilon, mode)?
            }
        };
        let scored: Vec<(LayerScore, Matrix)> = remaining
            .par_iter()
            .map(|&l| {
                let source = match cfg.context_update {
                    ContextUpdate::Sequential => &work[l],
                    ContextUpdate::Joint => stack.layer(l),
                };
                let orth = projector.apply(source)?;
                let loss = in_sample_mse(&orth, &residual, cfg.lambda)?;
                let tri = match labels {
                    Some(labels) if cfg.task.uses_triangle() => {
                        triangle_score(&orth, labels, budget, triplet_seed(cfg.seed, l))?
                    }
                    _ => 0.0,
                };
                Ok((LayerScore::assemble(l, loss, cache.isotropy[l], red[l], tri, &cfg), orth))
            })
            .collect::<Result<_>>()?;
        let (candidates, orths): (Vec<LayerScore>, Vec<Matrix>) = scored.into_iter().unzip();
        if cfg.context_update == ContextUpdate::Sequential {
            for (&l, orth) in remaining.iter().zip(orths) {
                work[l] = orth;
            }
        }
        let Some(best) = argmin(&candidates) else {
            break;
        };
        let chosen = candidates[best].clone();
        selected.push(chosen.layer);
        residual = accumulate(stack.layer(chosen.layer), y, &mut y_hat, cfg.lambda)?;
        trace.push(mse(&residual, &Matrix::zeros(y.nrows(), y.ncols())));
        steps.push(SelectionStep { chosen, candidates });
    }

    Ok(SelectionResult {
        config: cfg,
        selected,
        steps,
        cumulative_mse_trace: trace,
        k_clamped,
        n_layers,
        n_calibration: stack.n_samples(),
        calibration_indices: (0..stack.n_samples()).collect(),
        classes: encoded.classes,
        unseen_classes: Vec::new(),
    })
}

/// Refits `x` against the full targets, adds its prediction to `y_hat` and
/// returns the new residual.
fn accumulate(x: &Matrix, y: &Matrix, y_hat: &mut Matrix, lambda: f64) -> Result<Matrix> {
    let fit = ridge_fit(x, y, lambda)?;
    *y_hat += ridge_predict(&fit, x)?;
    Ok(y - &*y_hat)
}

/// Draws the calibration split and runs the greedy selection on it.
pub fn loes_select(stack: &LayerStack, targets: &Targets, cfg: &LoesConfig) -> Result<SelectionResult> {
    let cfg = cfg.validated()?;
    if targets.len() != stack.n_samples() {
        return Err(LoesError::invalid(format!(
            "{} targets for {} samples",
            targets.len(),
            stack.n_samples()
        )));
    }
    let cal = calibration_split(stack.n_samples(), cfg.cal_fraction, cfg.seed)?;
    let cal_targets = targets.select_rows(&cal);
    let mut result = select_layers(&stack.select_rows(&cal), &cal_targets, &cfg)?;
    if let Targets::Labels(all) = targets {
        let seen: BTreeSet<usize> = result.classes.iter().copied().collect();
        result.unseen_classes = all
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|c| !seen.contains(c))
            .collect();
        if !result.unseen_classes.is_empty() {
            warn!("classes {:?} absent from the calibration split", result.unseen_classes);
        }
    }
    result.calibration_indices = cal;
    Ok(result)
}

/// Pixel features of one image: `height * width` rows in row-major pixel order.
#[derive(Debug, Clone)]
pub struct DenseImage {
    pub features: Matrix,
    /// Per-pixel label; `ignore_label` marks pixels that must not be sampled.
    pub mask: Vec<i64>,
}

/// Pixel locations chosen per image; shared by every layer of a dense stack.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPlan {
    pub positions: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub skipped_images: usize,
}

/// Picks `pixels_per_image` valid pixels from every mask.
///
/// Sampling is without replacement when an image has enough valid pixels and
/// with replacement otherwise. Images with no valid pixel are skipped.
pub fn plan_pixels(masks: &[Vec<i64>], pixels_per_image: usize, ignore_label: i64, seed: u64) -> Result<PixelPlan> {
    if pixels_per_image == 0 {
        return Err(LoesError::invalid("pixels_per_image must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(masks.len());
    let mut labels = Vec::new();
    let mut skipped = 0;
    for mask in masks {
        let valid: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != ignore_label)
            .map(|(i, _)| i)
            .collect();
        if valid.is_empty() {
            skipped += 1;
            positions.push(Vec::new());
            continue;
        }
        let picks: Vec<usize> = if valid.len() >= pixels_per_image {
            let mut v = valid.clone();
            v.shuffle(&mut rng);
            v.truncate(pixels_per_image);
            v
        } else {
            (0..pixels_per_image)
                .map(|_| valid[rng.random_range(0..valid.len())])
                .collect()
        };
        for &p in &picks {
            let m = mask[p];
            if m < 0 {
                return Err(LoesError::invalid(format!("negative class label {m} in mask")));
            }
            labels.push(m as usize);
        }
        positions.push(picks);
    }
    Ok(PixelPlan {
        positions,
        labels,
        skipped_images: skipped,
    })
}

/// Gathers the planned pixels of one layer into a `(images·M) × d` matrix.
pub fn gather_pixels(images: &[Matrix], plan: &PixelPlan) -> Result<Matrix> {
    if images.len() != plan.positions.len() {
        return Err(LoesError::invalid("image count does not match the pixel plan"));
    }
    let d = images.first().map_or(0, |m| m.ncols());
    let rows: Vec<_> = images
        .iter()
        .zip(&plan.positions)
        .flat_map(|(img, pos)| pos.iter().map(move |&p| img.row(p).into_owned()))
        .collect();
    if rows.iter().any(|r| r.ncols() != d) {
        return Err(LoesError::invalid("images disagree on feature dimension"));
    }
    Ok(if rows.is_empty() {
        Matrix::zeros(0, d)
    } else {
        Matrix::from_rows(&rows)
    })
}

/// Samples pixel rows and labels from one layer of dense per-image features.
pub fn flatten_dense(
    images: &[DenseImage],
    pixels_per_image: usize,
    ignore_label: i64,
    seed: u64,
) -> Result<(Matrix, Vec<usize>, usize)> {
    for img in images {
        if img.features.nrows() != img.mask.len() {
            return Err(LoesError::invalid("mask length does not match pixel count"));
        }
    }
    let masks: Vec<Vec<i64>> = images.iter().map(|i| i.mask.clone()).collect();
    let plan = plan_pixels(&masks, pixels_per_image, ignore_label, seed)?;
    let feats: Vec<Matrix> = images.iter().map(|i| i.features.clone()).collect();
    Ok((gather_pixels(&feats, &plan)?, plan.labels, plan.skipped_images))
}

/// Mean of each column, exposed for report summaries.
pub fn column_means(x: &Matrix) -> DVector<f64> {
    x.row_mean().transpose()
}
