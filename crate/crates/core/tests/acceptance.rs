//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fail.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use loes::baselines::{evaluate_subset, exhaustive_search, ProbeSplit, DEFAULT_SUBSET_BUDGET};
use loes::geometry::{frobenius_alignment, orthogonalize};
use loes::georeg::{finite_diff_grad, georeg_iso, georeg_loss};
use loes::io::{read_manifest, read_tensor, write_dataset, write_tensor, Dtype};
use loes::ridge::{one_hot, ridge_fit, ridge_fit_with, ridge_predict, mse, RidgeOptions, RidgeSolver};
use loes::selection::{loes_select, select_layers, LoesConfig, TaskMode};
use loes::synth::{generate, PlantedSpec, RedundantLayer};
use loes::theory::{
    alignment_bias, estimation_variance, jensen_gap, monte_carlo_param_error, random_spectrum, ErrorMode,
    TheoryParams,
};
use loes::{LayerStack, LoesError, Matrix, Targets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(rand_distr::StandardNormal))
}

fn ridge_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_normal: f64 = 0.0;
    let mut worst_agree: f64 = 0.0;
    let mut wide = 0;
    for case in 0..100 {
        let n = rng.random_range(2..80);
        let d = if case % 3 == 0 { n + rng.random_range(1..60) } else { rng.random_range(1..60) };
        let c = rng.random_range(1..6);
        let lambda = 10f64.powf(rng.random_range(-3.0..1.0));
        let x = gaussian(n, d, &mut rng);
        let y = gaussian(n, c, &mut rng);
        if d > n {
            wide += 1;
        }
        let raw = |solver| RidgeOptions { center: false, solver };
        let primal = ridge_fit_with(&x, &y, lambda, raw(RidgeSolver::Primal)).unwrap().weights;
        let dual = ridge_fit_with(&x, &y, lambda, raw(RidgeSolver::Dual)).unwrap().weights;
        let auto = ridge_fit_with(&x, &y, lambda, raw(RidgeSolver::Auto)).unwrap().weights;
        let xty = x.tr_mul(&y);
        let mut gram = x.tr_mul(&x);
        for i in 0..d {
            gram[(i, i)] += lambda;
        }
        let rel = (&gram * &auto - &xty).norm() / xty.norm().max(f64::MIN_POSITIVE);
        worst_normal = worst_normal.max(rel);
        worst_agree = worst_agree.max((&primal - &dual).norm() / primal.norm().max(f64::MIN_POSITIVE));
    }
    outcome(
        worst_normal < 1e-8 && worst_agree < 1e-8,
        format!("max normal-equation residual {worst_normal:.2e}, primal/dual gap {worst_agree:.2e}, {wide} cases with d > N"),
    )
}

fn planted_recovery() -> Outcome {
    let mut hits = 0;
    let mut misses = Vec::new();
    for seed in 0..100u64 {
        let spec = PlantedSpec::new(8, 512, 32, 4, vec![2, 5], 5.0, seed);
        let data = generate(&spec).unwrap();
        let mut cfg = LoesConfig::default();
        cfg.k = 2;
        cfg.seed = seed;
        let res = loes_select(&data.stack, &Targets::Labels(data.labels), &cfg).unwrap();
        let mut got = res.selected.clone();
        got.sort_unstable();
        if got == [2, 5] {
            hits += 1;
        } else {
            misses.push((seed, res.selected));
        }
    }
    let mut detail = format!("{hits}/100 runs returned {{2, 5}}");
    if !misses.is_empty() {
        detail.push_str(&format!("; first misses {:?}", &misses[..misses.len().min(3)]));
    }
    outcome(hits >= 95, detail)
}

fn oracle_proximity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut exact = 0;
    for i in 0..20u64 {
        let spec = PlantedSpec::new(8, 2048, 32, 8, vec![1, 4, 6], 5.0, 1000 + i);
        let data = generate(&spec).unwrap();
        let targets = Targets::Labels(data.labels);
        let mut cfg = LoesConfig::default();
        cfg.k = 3;
        cfg.seed = i;
        let res = loes_select(&data.stack, &targets, &cfg).unwrap();
        let split = ProbeSplit::from_calibration(data.stack.n_samples(), cfg.cal_fraction, cfg.seed).unwrap();
        let mine = evaluate_subset(&data.stack, &res.selected, &targets, cfg.lambda, &split).unwrap();
        let ranking = exhaustive_search(&data.stack, &targets, 3, cfg.lambda, &split, DEFAULT_SUBSET_BUDGET).unwrap();
        let gap = ranking[0].probe_accuracy.unwrap() - mine.probe_accuracy.unwrap();
        if gap <= 0.0 {
            exact += 1;
        }
        worst = worst.max(gap);
    }
    outcome(
        worst <= 0.02,
        format!("largest gap to the exhaustive optimum {:.2} pp; {exact}/20 matched it", 100.0 * worst),
    )
}

fn redundancy_avoidance() -> Outcome {
    let mut violations = 0;
    let mut min_red: f64 = 1.0;
    for seed in 0..50u64 {
        let mut spec = PlantedSpec::new(8, 512, 32, 4, vec![2, 5], 5.0, 2000 + seed);
        spec.redundancy = vec![RedundantLayer {
            layer: 3,
            source: 2,
            noise: 0.1,
        }];
        let data = generate(&spec).unwrap();
        min_red = min_red.min(frobenius_alignment(data.stack.layer(2), data.stack.layer(3)).unwrap());
        let mut cfg = LoesConfig::default();
        cfg.k = 3;
        cfg.gamma = 0.5;
        cfg.seed = seed;
        let res = loes_select(&data.stack, &Targets::Labels(data.labels), &cfg).unwrap();
        let pos = |l: usize| res.selected.iter().position(|&s| s == l).unwrap_or(usize::MAX);
        if pos(2).max(pos(3)) < pos(5) {
            violations += 1;
        }
    }
    outcome(
        violations == 0 && min_red > 0.95,
        format!("copy/source redundancy >= {min_red:.4}; {violations}/50 runs picked both before layer 5"),
    )
}

fn theorem_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut min_gap = f64::INFINITY;
    let mut order_failures = 0;
    for _ in 0..1000 {
        let d = rng.random_range(2..=16);
        let trace = 10.0;
        let lambda = rng.random_range(0.01..5.0);
        let spectrum = random_spectrum(d, trace, rng.random());
        min_gap = min_gap.min(jensen_gap(&spectrum, lambda));
        let p = TheoryParams::new(spectrum, lambda, 1.0, 0.0).unwrap();
        let flat = TheoryParams::new(vec![trace / d as f64; d], lambda, 1.0, 0.0).unwrap();
        if alignment_bias(&flat) >= alignment_bias(&p) {
            order_failures += 1;
        }
    }
    let flat = TheoryParams::new(vec![2.5; 4], 0.3, 1.0, 0.0).unwrap();
    let equal = (alignment_bias(&flat) - alignment_bias(&flat.clone())).abs() < 1e-10
        && jensen_gap(&flat.spectrum, 0.3).abs() < 1e-10;
    outcome(
        min_gap >= -1e-12 && order_failures == 0 && equal,
        format!("min Jensen gap {min_gap:.3e}; uniform lost to a non-uniform spectrum {order_failures}/1000 times"),
    )
}

fn lemma_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let d = rng.random_range(1..=8);
        let p = TheoryParams::new(
            random_spectrum(d, rng.random_range(1.0..10.0), rng.random()),
            rng.random_range(0.05..2.0),
            rng.random_range(0.5..4.0),
            rng.random_range(0.0..2.0),
        )
        .unwrap();
        let (mean, se) = monte_carlo_param_error(&p, 0, 10_000, rng.random(), ErrorMode::Population).unwrap();
        let closed = alignment_bias(&p) + estimation_variance(&p);
        worst = worst.max((mean - closed).abs() / se);
    }
    outcome(worst <= 3.0, format!("largest sampler deviation {worst:.2} standard errors"))
}

fn georeg_sanity() -> Outcome {
    // Columns with zero mean, equal norm and mutual orthogonality give covariance c·I.
    let mut max_iso: f64 = 0.0;
    for (b, d, scale) in [(4usize, 2usize, 1.0), (8, 4, 0.3), (16, 8, 7.0)] {
        let mut h = Matrix::from_element(1, 1, 1.0);
        while h.nrows() < b {
            let n = h.nrows();
            let mut next = Matrix::zeros(2 * n, 2 * n);
            next.view_mut((0, 0), (n, n)).copy_from(&h);
            next.view_mut((0, n), (n, n)).copy_from(&h);
            next.view_mut((n, 0), (n, n)).copy_from(&h);
            next.view_mut((n, n), (n, n)).copy_from(&(-&h));
            h = next;
        }
        // Skip the constant Hadamard column so every column is centered.
        let z = h.columns(1, d).into_owned() * scale;
        max_iso = max_iso.max(georeg_iso(&z).unwrap().abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels: Vec<usize> = (0..24).map(|i| i % 4).collect();
    let anis = |rng: &mut ChaCha8Rng| Matrix::from_fn(24, 4, |_, j| rng.random_range(-1.0..1.0) / (1.0 + j as f64));
    let z = anis(&mut rng);
    let h = 1e-2;
    let g1 = finite_diff_grad(&z, &labels, 0.1, 1e-8, h).unwrap();
    let g2 = finite_diff_grad(&z, &labels, 0.1, 1e-8, h / 2.0).unwrap();
    let g4 = finite_diff_grad(&z, &labels, 0.1, 1e-8, h / 4.0).unwrap();
    let ratio = (&g1 - &g2).norm() / (&g2 - &g4).norm();

    let mut decreased = 0;
    for _ in 0..20 {
        let z = anis(&mut rng);
        let before = georeg_loss(&z, &labels, 0.1, 1e-8, 0).unwrap().total;
        let g = finite_diff_grad(&z, &labels, 0.1, 1e-8, 1e-5).unwrap();
        let after = georeg_loss(&(z - g * 1e-2), &labels, 0.1, 1e-8, 0).unwrap().total;
        if after < before {
            decreased += 1;
        }
    }
    outcome(
        max_iso <= 1e-10 && ratio >= 3.0 && decreased == 20,
        format!("isotropic iso_term {max_iso:.1e}; Richardson ratio {ratio:.3}; descent step lowered loss on {decreased}/20"),
    )
}

fn ablation_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for seed in 0..5u64 {
        let spec = PlantedSpec::new(6, 300, 8, 4, vec![1, 4], 3.0, 300 + seed);
        let data = generate(&spec).unwrap();
        let mut cfg = LoesConfig::default();
        cfg.k = 4;
        cfg.alpha = 0.0;
        cfg.gamma = 0.0;
        cfg.eta = 0.0;
        cfg.seed = seed;
        let res = loes_select(&data.stack, &Targets::Labels(data.labels.clone()), &cfg).unwrap();
        let rows = &res.calibration_indices;
        let stack = data.stack.select_rows(rows);
        let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
        let y = one_hot(&labels, 4).unwrap();
        let in_sample = |x: &Matrix, t: &Matrix| mse(&ridge_predict(&ridge_fit(x, t, cfg.lambda).unwrap(), x).unwrap(), t);
        // Each remaining layer is residualized against the newest pick's residualized block.
        let mut work: Vec<Matrix> = stack.layers().to_vec();
        let mut y_hat = Matrix::zeros(y.nrows(), y.ncols());
        for (s, step) in res.steps.iter().enumerate() {
            let residual = &y - &y_hat;
            if s > 0 {
                let newest = work[res.selected[s - 1]].clone();
                for cand in &step.candidates {
                    work[cand.layer] = orthogonalize(&work[cand.layer], &newest, cfg.epsilon).unwrap();
                }
            }
            for cand in &step.candidates {
                let expected = if s == 0 {
                    in_sample(stack.layer(cand.layer), &y)
                } else {
                    in_sample(&work[cand.layer], &residual)
                };
                worst = worst.max((cand.composite - expected).abs());
                compared += 1;
            }
            let chosen = stack.layer(res.selected[s]);
            y_hat += ridge_predict(&ridge_fit(chosen, &y, cfg.lambda).unwrap(), chosen).unwrap();
        }
    }
    outcome(worst <= 1e-12, format!("{compared} candidate scores, max |composite - residual MSE| {worst:.2e}"))
}

fn median_time(stack: &LayerStack, targets: &Targets, k: usize, reps: usize) -> f64 {
    let mut cfg = LoesConfig::default();
    cfg.k = k;
    let mut times: Vec<Duration> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            select_layers(stack, targets, &cfg).unwrap();
            t.elapsed()
        })
        .collect();
    times.sort();
    times[reps / 2].as_secs_f64()
}

/// Largest ratio of measured time to the least-squares line through the points.
fn worst_ratio(xs: &[f64], ts: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let mt = ts.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxt: f64 = xs.iter().zip(ts).map(|(x, t)| (x - mx) * (t - mt)).sum();
    let slope = sxt / sxx;
    let icept = mt - slope * mx;
    xs.iter()
        .zip(ts)
        .map(|(x, t)| t / (icept + slope * x).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn complexity_scaling() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let (n, d) = (200, 16);
        let make = |layers: usize| {
            let spec = PlantedSpec::new(layers, n, d, 4, vec![1, layers / 2], 3.0, layers as u64);
            let data = generate(&spec).unwrap();
            (data.stack, Targets::Labels(data.labels))
        };
        let ls = [8usize, 16, 32, 64];
        let t_l: Vec<f64> = ls
            .iter()
            .map(|&l| {
                let (s, t) = make(l);
                median_time(&s, &t, 3, 7)
            })
            .collect();
        let (s, t) = make(16);
        let ks: Vec<usize> = (1..=6).collect();
        let t_k: Vec<f64> = ks.iter().map(|&k| median_time(&s, &t, k, 7)).collect();
        let as_f = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let rl = worst_ratio(&as_f(&ls), &t_l);
        let rk = worst_ratio(&as_f(&ks), &t_k);
        let ms = |v: &[f64]| v.iter().map(|t| format!("{:.2}", t * 1e3)).collect::<Vec<_>>().join("/");
        outcome(
            rl <= 1.5 && rk <= 1.5,
            format!("L sweep {} ms (worst/fit {rl:.2}); K sweep {} ms (worst/fit {rk:.2})", ms(&t_l), ms(&t_k)),
        )
    })
}

fn io_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = true;
    for (r, c) in [(0, 0), (1, 1), (3, 2), (17, 5)] {
        let mut m = gaussian(r, c, &mut rng);
        if r * c > 2 {
            m[(0, 0)] = f64::MIN_POSITIVE / 4.0;
            m[(1, 0)] = -0.0;
        }
        let p = dir.path().join(format!("t{r}x{c}.bin"));
        write_tensor(&p, &m, Dtype::F64).unwrap();
        let back = read_tensor(&p).unwrap();
        exact &= back.shape() == m.shape() && m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        exact &= std::fs::metadata(&p).unwrap().len() as usize == 28 + 8 * r * c;
    }

    let stack = LayerStack::new(vec![gaussian(10, 3, &mut rng), gaussian(10, 4, &mut rng)]).unwrap();
    let labels = Matrix::from_fn(10, 1, |i, _| (i % 3) as f64);
    let ds_dir = dir.path().join("ds");
    let manifest = write_dataset(&ds_dir, &stack, &labels, TaskMode::Classification, Some(3), Dtype::F64, BTreeMap::new()).unwrap();
    let loaded = read_manifest(ds_dir.join("manifest.json")).unwrap();
    exact &= loaded.manifest == manifest;
    for (a, b) in stack.layers().iter().zip(loaded.stack.layers()) {
        exact &= a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    }

    let good = std::fs::read(dir.path().join("t3x2.bin")).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"NOPE");
    let truncated = good[..good.len() - 3].to_vec();
    let mut rejected = 0;
    for (name, bytes) in [("magic", bad_magic), ("trunc", truncated)] {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        if matches!(read_tensor(&p), Err(LoesError::FormatError { .. })) {
            rejected += 1;
        }
    }
    outcome(
        exact && rejected == 2,
        format!("bit-exact tensors and manifest: {exact}; malformed files rejected as format errors: {rejected}/2"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("ridge correctness", ridge_correctness, Duration::from_secs(10)),
        ("planted-layer recovery", planted_recovery, Duration::from_secs(60)),
        ("oracle proximity", oracle_proximity, Duration::from_secs(300)),
        ("redundancy avoidance", redundancy_avoidance, Duration::MAX),
        ("isotropy theorem", theorem_check, Duration::from_secs(5)),
        ("error decomposition lemma", lemma_check, Duration::MAX),
        ("georeg sanity", georeg_sanity, Duration::MAX),
        ("ablation identity", ablation_identity, Duration::MAX),
        ("complexity scaling", complexity_scaling, Duration::MAX),
        ("i/o round trip", io_round_trip, Duration::MAX),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let mut result = check();
        let elapsed = start.elapsed();
        if elapsed > limit {
            result.pass = false;
            result.detail.push_str(&format!("; over the {}s limit", limit.as_secs()));
        }
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("{tag} {name} ({:.2}s): {}", elapsed.as_secs_f64(), result.detail);
        if !result.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
