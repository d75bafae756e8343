//! Reference layer-subset strategies: exhaustive oracle, random, last-k and
//! per-layer probe ranking.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use itertools::Itertools;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ridge::{argmax_rows, accuracy, mse, ridge_fit, ridge_predict};
use crate::selection::{calibration_split, complement, EncodedTargets};
use crate::{LayerStack, LoesError, Result, Targets};

/// Default cap on the number of subsets an exhaustive search may evaluate.
pub const DEFAULT_SUBSET_BUDGET: u128 = 100_000;

/// Rows used to fit a probe and rows used to score it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSplit {
    pub fit: Vec<usize>,
    pub eval: Vec<usize>,
}

impl ProbeSplit {
    /// Fit on the calibration rows, evaluate on the rest. When the calibration
    /// split covers every row the probe is scored in-sample.
    pub fn from_calibration(n: usize, fraction: f64, seed: u64) -> Result<Self> {
        let fit = calibration_split(n, fraction, seed)?;
        let mut eval = complement(n, &fit);
        if eval.is_empty() {
            eval = fit.clone();
        }
        Ok(Self { fit, eval })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetEvaluation {
    pub subset: Vec<usize>,
    /// In-sample MSE on the fit rows.
    pub train_mse: f64,
    /// MSE on the evaluation rows.
    pub eval_mse: f64,
    /// Argmax accuracy on the evaluation rows; absent for regression.
    pub probe_accuracy: Option<f64>,
    /// 1-based position in a ranking; 0 when unranked.
    pub rank: usize,
}

/// Best first: higher accuracy, then lower evaluation MSE, then lexicographic subset.
pub fn ranking_order(a: &SubsetEvaluation, b: &SubsetEvaluation) -> Ordering {
    let acc = match (a.probe_accuracy, b.probe_accuracy) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        _ => Ordering::Equal,
    };
    acc.then_with(|| a.eval_mse.total_cmp(&b.eval_mse))
        .then_with(|| a.subset.cmp(&b.subset))
}

fn check_subset(stack: &LayerStack, subset: &[usize]) -> Result<()> {
    if subset.is_empty() {
        return Err(LoesError::invalid("subset is empty"));
    }
    if subset.iter().any(|&i| i >= stack.len()) {
        return Err(LoesError::invalid("subset index out of range"));
    }
    if subset.iter().collect::<BTreeSet<_>>().len() != subset.len() {
        return Err(LoesError::invalid("subset has duplicate indices"));
    }
    Ok(())
}

/// Shared encoding so every subset sees identical targets.
struct Prepared<'a> {
    stack: &'a LayerStack,
    fit_y: crate::Matrix,
    eval_y: crate::Matrix,
    eval_labels: Option<Vec<usize>>,
    split: &'a ProbeSplit,
}

impl<'a> Prepared<'a> {
    fn new(stack: &'a LayerStack, targets: &Targets, split: &'a ProbeSplit) -> Result<Self> {
        if targets.len() != stack.n_samples() {
            return Err(LoesError::invalid("target count does not match sample count"));
        }
        let (fit_y, eval_y, eval_labels) = match targets {
            Targets::Values(v) => (v.select_rows(&split.fit), v.select_rows(&split.eval), None),
            Targets::Labels(labels) => {
                let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
                let pick = |rows: &[usize]| rows.iter().map(|&r| labels[r]).collect::<Vec<_>>();
                let fit = EncodedTargets::encode_with_classes(&pick(&split.fit), &classes)?;
                let eval = EncodedTargets::encode_with_classes(&pick(&split.eval), &classes)?;
                (fit.y, eval.y, eval.class_index)
            }
        };
        Ok(Self {
            stack,
            fit_y,
            eval_y,
            eval_labels,
            split,
        })
    }

    fn evaluate(&self, subset: &[usize], lambda: f64) -> Result<SubsetEvaluation> {
        check_subset(self.stack, subset)?;
        let x = self.stack.concat(subset);
        let x_fit = x.select_rows(&self.split.fit);
        let x_eval = x.select_rows(&self.split.eval);
        let fit = ridge_fit(&x_fit, &self.fit_y, lambda)?;
        let train_mse = mse(&ridge_predict(&fit, &x_fit)?, &self.fit_y);
        let pred = ridge_predict(&fit, &x_eval)?;
        let probe_accuracy = self
            .eval_labels
            .as_ref()
            .map(|labels| accuracy(&argmax_rows(&pred), labels));
        Ok(SubsetEvaluation {
            subset: subset.to_vec(),
            train_mse,
            eval_mse: mse(&pred, &self.eval_y),
            probe_accuracy,
            rank: 0,
        })
    }
}

/// Concatenates the subset's raw features and scores a single ridge probe.
pub fn evaluate_subset(
    stack: &LayerStack,
    subset: &[usize],
    targets: &Targets,
    lambda: f64,
    split: &ProbeSplit,
) -> Result<SubsetEvaluation> {
    Prepared::new(stack, targets, split)?.evaluate(subset, lambda)
}

/// `C(n, k)` without overflow for the sizes we care about.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Evaluates every `k`-subset and returns them best first.
pub fn exhaustive_search(
    stack: &LayerStack,
    targets: &Targets,
    k: usize,
    lambda: f64,
    split: &ProbeSplit,
    budget: u128,
) -> Result<Vec<SubsetEvaluation>> {
    if k == 0 || k > stack.len() {
        return Err(LoesError::invalid(format!("k={k} must lie in 1..={}", stack.len())));
    }
    let count = binomial(stack.len(), k);
    if count > budget {
        return Err(LoesError::BudgetExceeded { count, budget });
    }
    let prepared = Prepared::new(stack, targets, split)?;
    let subsets: Vec<Vec<usize>> = (0..stack.len()).combinations(k).collect();
    let mut evals: Vec<SubsetEvaluation> = subsets
        .par_iter()
        .map(|s| prepared.evaluate(s, lambda))
        .collect::<Result<_>>()?;
    evals.sort_by(ranking_order);
    for (i, e) in evals.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    Ok(evals)
}

/// `k` distinct uniformly drawn layers, ascending.
pub fn random_k(n_layers: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n_layers {
        return Err(LoesError::invalid(format!("k={k} exceeds {n_layers} layers")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n_layers, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// The final `k` layers.
pub fn last_k(n_layers: usize, k: usize) -> Result<Vec<usize>> {
    if k > n_layers {
        return Err(LoesError::invalid(format!("k={k} exceeds {n_layers} layers")));
    }
    Ok((n_layers - k..n_layers).collect())
}

/// The `k` layers whose individual probes score best, best first.
pub fn greedy_probe(
    stack: &LayerStack,
    targets: &Targets,
    k: usize,
    lambda: f64,
    split: &ProbeSplit,
) -> Result<Vec<usize>> {
    if k > stack.len() {
        return Err(LoesError::invalid(format!("k={k} exceeds {} layers", stack.len())));
    }
    let prepared = Prepared::new(stack, targets, split)?;
    let mut evals: Vec<SubsetEvaluation> = (0..stack.len())
        .into_par_iter()
        .map(|l| prepared.evaluate(&[l], lambda))
        .collect::<Result<_>>()?;
    evals.sort_by(ranking_order_by_accuracy_then_index);
    Ok(evals.into_iter().take(k).map(|e| e.subset[0]).collect())
}

fn ranking_order_by_accuracy_then_index(a: &SubsetEvaluation, b: &SubsetEvaluation) -> Ordering {
    match (a.probe_accuracy, b.probe_accuracy) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        _ => a.eval_mse.total_cmp(&b.eval_mse),
    }
    .then_with(|| a.subset.cmp(&b.subset))
}
