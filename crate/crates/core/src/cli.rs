//! Command-line front end. `run` parses argv, executes one subcommand and
//! returns the process exit code.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{
    evaluate_subset, exhaustive_search, greedy_probe, last_k, random_k, ProbeSplit, SubsetEvaluation,
    DEFAULT_SUBSET_BUDGET,
};
use crate::georeg::{finite_diff_grad, georeg_iso, georeg_loss, DEFAULT_EPS, DEFAULT_LAMBDA_GEO};
use crate::io::{self, Dataset, Dtype, LayerDiagnostics};
use crate::ridge::{ProbeMetrics, DEFAULT_LAMBDA};
use crate::selection::{loes_select, ContextUpdate, LoesConfig, OrthoModeSetting, SelectionResult, TaskMode};
use crate::spectral::{spectrum_report, DEFAULT_DELTA};
use crate::synth::{generate, PlantedSpec};
use crate::theory::{
    alignment_bias, estimation_variance, jensen_gap, monte_carlo_param_error, random_spectrum, ErrorMode,
    TheoryParams,
};
use crate::{LoesError, Matrix};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "loes", version, about = "Select complementary encoder layers for a downstream task")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "LOES_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Greedy layer selection on a manifest.
    Select(SelectArgs),
    /// Per-layer spectrum and single-layer probe diagnostics (JSON + CSV).
    Score(ScoreArgs),
    /// Selected sets and held-out probe accuracy for k = 1..=k-max.
    SweepK(SweepArgs),
    /// Exhaustive ranking of every k-subset.
    Oracle(OracleArgs),
    /// Reference subsets: random, per-layer probe greedy, or last k.
    Baseline(BaselineArgs),
    /// Write a planted synthetic dataset.
    Synth(SynthArgs),
    /// Checks of the geometric regularizer and its numeric gradient.
    GeoregCheck(GeoregArgs),
    /// Numerical checks of the ridge error decomposition and isotropy optimality.
    VerifyTheory(TheoryArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long = "cal-frac", default_value_t = 0.2)]
    cal_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoringArgs {
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Defaults to 0.1 for classification and 0 otherwise.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = crate::geometry::DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Centroid triplets averaged per score.
    #[arg(long)]
    triplets: Option<usize>,
    #[arg(long, value_enum, default_value_t = OrthoArg::Centered)]
    ortho: OrthoArg,
    /// Residualize against the newest pick only, or against the whole selected set.
    #[arg(long, value_enum, default_value_t = ContextArg::Sequential)]
    context: ContextArg,
    /// Add wall-clock selection time to the report (breaks byte-identical reruns).
    #[arg(long)]
    record_timing: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ContextArg {
    Sequential,
    Joint,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OrthoArg {
    Centered,
    Uncentered,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long, default_value_t = 4)]
    k: usize,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long = "k-max", default_value_t = 10)]
    k_max: usize,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_SUBSET_BUDGET)]
    budget: u128,
    /// Keep only the best N subsets in the report.
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Random,
    Greedy,
    Last,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, default_value_t = 4)]
    k: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// PlantedSpec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for tensors and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    dtype: DtypeArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct GeoregArgs {
    /// Finite-difference step for the descent check.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Base step of the h, h/2, h/4 consistency check; small steps drown in roundoff.
    #[arg(long = "richardson-step", default_value_t = 1e-2)]
    richardson_step: f64,
    #[arg(long = "lambda-geo", default_value_t = DEFAULT_LAMBDA_GEO)]
    lambda_geo: f64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = 20)]
    batches: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TheoryArgs {
    /// Monte Carlo trials per parameter draw.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Random spectra for the convexity sweep.
    #[arg(long, default_value_t = 1000)]
    spectra: usize,
    /// Random parameter sets for the sampler comparison.
    #[arg(long, default_value_t = 10)]
    params: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failed run: exit code plus message for stderr.
struct Failure(i32, String);

impl From<LoesError> for Failure {
    fn from(e: LoesError) -> Self {
        let code = match e {
            LoesError::NumericalFailure(_) | LoesError::DegenerateSpectrum(_) => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
        Failure(code, e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure(EXIT_USAGE, msg.into())
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Select(a) => select(a),
        Command::Score(a) => score(a),
        Command::SweepK(a) => sweep(a),
        Command::Oracle(a) => oracle(a),
        Command::Baseline(a) => baseline(a),
        Command::Synth(a) => synth(a),
        Command::GeoregCheck(a) => georeg_check(a),
        Command::VerifyTheory(a) => verify_theory(a),
    }
}

fn print_config<T: Serialize>(config: &T) -> Result<(), Failure> {
    let json = serde_json::to_string(config).map_err(LoesError::from)?;
    println!("config: {json}");
    Ok(())
}

fn emit<T: Serialize>(out: Option<&Path>, report: &T) -> Result<(), Failure> {
    match out {
        Some(p) => {
            io::write_report(p, report)?;
            info!("wrote {}", p.display());
        }
        None => print!("{}", io::to_json(report)?),
    }
    Ok(())
}

fn load(data: &DataArgs) -> Result<Dataset, Failure> {
    let ds = io::read_manifest(&data.manifest)?;
    if ds.skipped_images > 0 {
        eprintln!("warning: {} images had no valid pixels and were skipped", ds.skipped_images);
    }
    Ok(ds)
}

fn check_fraction(f: f64) -> Result<(), Failure> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(usage("--cal-frac must lie in (0, 1]"))
    }
}

fn build_config(task: TaskMode, k: usize, data: &DataArgs, s: &ScoringArgs) -> Result<LoesConfig, Failure> {
    let mut cfg = LoesConfig::for_task(task);
    cfg.k = k;
    cfg.alpha = s.alpha;
    cfg.gamma = s.gamma;
    if let Some(eta) = s.eta {
        cfg.eta = eta;
    }
    cfg.lambda = data.lambda;
    cfg.epsilon = s.epsilon;
    cfg.delta = s.delta;
    cfg.cal_fraction = data.cal_frac;
    cfg.seed = data.seed;
    cfg.n_triplets = s.triplets;
    cfg.ortho_mode = match s.ortho {
        OrthoArg::Centered => OrthoModeSetting::Centered,
        OrthoArg::Uncentered => OrthoModeSetting::Uncentered,
    };
    cfg.context_update = match s.context {
        ContextArg::Sequential => ContextUpdate::Sequential,
        ContextArg::Joint => ContextUpdate::Joint,
    };
    cfg.validated().map_err(|e| usage(e.to_string()))
}

#[derive(Serialize)]
struct SelectReport<'a> {
    command: &'static str,
    manifest: &'a Path,
    result: SelectionResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_seconds: Option<f64>,
}

fn timed<T>(label: &str, f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    let secs = start.elapsed().as_secs_f64();
    eprintln!("{label} took {secs:.3}s");
    (out, secs)
}

fn select(a: SelectArgs) -> Result<(), Failure> {
    // Validate flags before touching the data so usage errors win.
    let cfg = build_config(TaskMode::Classification, a.k, &a.data, &a.scoring)?;
    let ds = load(&a.data)?;
    let cfg = build_config(ds.manifest.task, cfg.k, &a.data, &a.scoring)?;
    print_config(&cfg)?;
    let (result, secs) = timed("selection", || loes_select(&ds.stack, &ds.targets, &cfg));
    let report = SelectReport {
        command: "select",
        manifest: &a.data.manifest,
        result: result?,
        elapsed_seconds: a.scoring.record_timing.then_some(secs),
    };
    emit(a.data.out.as_deref(), &report)
}

fn score(a: ScoreArgs) -> Result<(), Failure> {
    check_fraction(a.data.cal_frac)?;
    let ds = load(&a.data)?;
    print_config(&serde_json::json!({
        "lambda": a.data.lambda,
        "delta": a.delta,
        "cal_fraction": a.data.cal_frac,
        "seed": a.data.seed,
    }))?;
    let split = ProbeSplit::from_calibration(ds.stack.n_samples(), a.data.cal_frac, a.data.seed)?;
    let rows = (0..ds.stack.len())
        .map(|l| {
            let spectrum = spectrum_report(ds.stack.layer(l), a.delta)?;
            let eval = evaluate_subset(&ds.stack, &[l], &ds.targets, a.data.lambda, &split)?;
            Ok(LayerDiagnostics {
                layer: l,
                spectrum,
                probe: ProbeMetrics {
                    mse: eval.eval_mse,
                    accuracy: eval.probe_accuracy,
                },
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    match &a.data.out {
        Some(p) => {
            let csv = io::write_diagnostics(p, &rows)?;
            info!("wrote {} and {}", p.display(), csv.display());
        }
        None => print!("{}", io::diagnostics_csv(&rows)),
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    k: usize,
    selected: Vec<usize>,
    eval_mse: f64,
    probe_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct SweepReport<'a> {
    command: &'static str,
    manifest: &'a Path,
    config: LoesConfig,
    rows: Vec<SweepRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_seconds: Option<f64>,
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    build_config(TaskMode::Classification, a.k_max, &a.data, &a.scoring)?;
    let ds = load(&a.data)?;
    let k_max = a.k_max.min(ds.stack.len());
    let cfg = build_config(ds.manifest.task, k_max, &a.data, &a.scoring)?;
    print_config(&cfg)?;
    // The greedy order does not depend on k, so every k is a prefix of one run.
    let (result, secs) = timed("selection", || loes_select(&ds.stack, &ds.targets, &cfg));
    let result = result?;
    let split = ProbeSplit::from_calibration(ds.stack.n_samples(), cfg.cal_fraction, cfg.seed)?;
    let rows = (1..=result.selected.len())
        .map(|k| {
            let subset = result.selected[..k].to_vec();
            let eval = evaluate_subset(&ds.stack, &subset, &ds.targets, cfg.lambda, &split)?;
            Ok(SweepRow {
                k,
                selected: subset,
                eval_mse: eval.eval_mse,
                probe_accuracy: eval.probe_accuracy,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let report = SweepReport {
        command: "sweep-k",
        manifest: &a.data.manifest,
        config: cfg,
        rows,
        elapsed_seconds: a.scoring.record_timing.then_some(secs),
    };
    emit(a.data.out.as_deref(), &report)
}

#[derive(Serialize)]
struct EvalReport<'a, M: Serialize> {
    command: &'static str,
    manifest: &'a Path,
    settings: M,
    evaluations: Vec<SubsetEvaluation>,
}

fn oracle(a: OracleArgs) -> Result<(), Failure> {
    check_fraction(a.data.cal_frac)?;
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let ds = load(&a.data)?;
    let settings = serde_json::json!({
        "k": a.k,
        "lambda": a.data.lambda,
        "cal_fraction": a.data.cal_frac,
        "seed": a.data.seed,
        "budget": a.budget.to_string(),
    });
    print_config(&settings)?;
    let split = ProbeSplit::from_calibration(ds.stack.n_samples(), a.data.cal_frac, a.data.seed)?;
    let mut ranking = exhaustive_search(&ds.stack, &ds.targets, a.k, a.data.lambda, &split, a.budget)?;
    if let Some(top) = a.top {
        ranking.truncate(top);
    }
    let report = EvalReport {
        command: "oracle",
        manifest: &a.data.manifest,
        settings,
        evaluations: ranking,
    };
    emit(a.data.out.as_deref(), &report)
}

fn baseline(a: BaselineArgs) -> Result<(), Failure> {
    check_fraction(a.data.cal_frac)?;
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let ds = load(&a.data)?;
    let settings = serde_json::json!({
        "method": a.method,
        "k": a.k,
        "lambda": a.data.lambda,
        "cal_fraction": a.data.cal_frac,
        "seed": a.data.seed,
    });
    print_config(&settings)?;
    let split = ProbeSplit::from_calibration(ds.stack.n_samples(), a.data.cal_frac, a.data.seed)?;
    let subset = match a.method {
        Method::Random => random_k(ds.stack.len(), a.k, a.data.seed)?,
        Method::Greedy => greedy_probe(&ds.stack, &ds.targets, a.k, a.data.lambda, &split)?,
        Method::Last => last_k(ds.stack.len(), a.k)?,
    };
    let eval = evaluate_subset(&ds.stack, &subset, &ds.targets, a.data.lambda, &split)?;
    let report = EvalReport {
        command: "baseline",
        manifest: &a.data.manifest,
        settings,
        evaluations: vec![eval],
    };
    emit(a.data.out.as_deref(), &report)
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let spec: PlantedSpec = io::read_json(&a.spec).map_err(|e| Failure(EXIT_DATA, e.to_string()))?;
    spec.validate().map_err(|e| Failure(EXIT_DATA, e.to_string()))?;
    print_config(&spec)?;
    let data = generate(&spec)?;
    let labels = Matrix::from_iterator(data.labels.len(), 1, data.labels.iter().map(|&l| l as f64));
    let dtype = match a.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    let mut meta = BTreeMap::new();
    meta.insert("generator".to_string(), "planted".to_string());
    meta.insert("seed".to_string(), spec.seed.to_string());
    io::write_dataset(&a.out, &data.stack, &labels, TaskMode::Classification, Some(spec.n_classes), dtype, meta)?;
    println!("wrote {}", a.out.join("manifest.json").display());
    Ok(())
}

/// Six points with centroids (0,0), (1,0), (0,1) and covariance I/3.
fn isotropic_batch() -> (Matrix, Vec<usize>) {
    let t = (2.0f64 / 9.0).sqrt() / std::f64::consts::SQRT_2;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, (x, y)) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)].into_iter().enumerate() {
        for s in [1.0, -1.0] {
            rows.extend_from_slice(&[x + s * t, y + s * t]);
            labels.push(c);
        }
    }
    (Matrix::from_row_slice(6, 2, &rows), labels)
}

fn anisotropic_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, j| rng.random_range(-1.0..1.0) / (1.0 + j as f64))
}

fn georeg_check(a: GeoregArgs) -> Result<(), Failure> {
    if !(a.step > 0.0) || !(a.richardson_step > 0.0) {
        return Err(usage("steps must be positive"));
    }
    print_config(&serde_json::json!({
        "step": a.step,
        "richardson_step": a.richardson_step,
        "lambda_geo": a.lambda_geo,
        "eps": a.eps,
        "batches": a.batches,
        "seed": a.seed,
    }))?;
    let (iso_z, _) = isotropic_batch();
    let iso = georeg_iso(&iso_z)?;
    println!("isotropic batch iso_term: {iso:e}");
    let mut ok = iso.abs() <= 1e-10;

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let labels: Vec<usize> = (0..24).map(|i| i % 4).collect();
    let z = anisotropic_batch(&mut rng, 24, 4);
    let h = a.richardson_step;
    let g1 = finite_diff_grad(&z, &labels, a.lambda_geo, a.eps, h)?;
    let g2 = finite_diff_grad(&z, &labels, a.lambda_geo, a.eps, h / 2.0)?;
    let g4 = finite_diff_grad(&z, &labels, a.lambda_geo, a.eps, h / 4.0)?;
    let (d1, d2) = ((&g1 - &g2).norm(), (&g2 - &g4).norm());
    let ratio = if d2 > 0.0 { d1 / d2 } else { f64::INFINITY };
    println!("richardson discrepancy ratio: {ratio:.3}");
    ok &= ratio >= 3.0;

    let mut decreased = 0;
    for _ in 0..a.batches {
        let z = anisotropic_batch(&mut rng, 24, 4);
        let before = georeg_loss(&z, &labels, a.lambda_geo, a.eps, 0)?.total;
        let g = finite_diff_grad(&z, &labels, a.lambda_geo, a.eps, a.step)?;
        let after = georeg_loss(&(z - g * 1e-2), &labels, a.lambda_geo, a.eps, 0)?.total;
        if after < before {
            decreased += 1;
        }
    }
    println!("gradient step decreased loss on {decreased}/{} batches", a.batches);
    ok &= decreased == a.batches;
    if ok {
        Ok(())
    } else {
        Err(Failure(EXIT_NUMERICAL, "georeg checks failed".into()))
    }
}

fn verify_theory(a: TheoryArgs) -> Result<(), Failure> {
    if a.trials < 100 {
        return Err(usage("--trials must be at least 100"));
    }
    print_config(&serde_json::json!({
        "trials": a.trials,
        "spectra": a.spectra,
        "params": a.params,
        "seed": a.seed,
    }))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut violation: f64 = 0.0;
    let mut bias_failures = 0;
    for _ in 0..a.spectra {
        let d = rng.random_range(2..=16);
        let trace = rng.random_range(0.5..20.0);
        let lambda = rng.random_range(0.01..5.0);
        let spectrum = random_spectrum(d, trace, rng.random());
        violation = violation.max(-jensen_gap(&spectrum, lambda));
        let p = TheoryParams::new(spectrum, lambda, 1.0, 0.0)?;
        let flat = TheoryParams::new(vec![trace / d as f64; d], lambda, 1.0, 0.0)?;
        if alignment_bias(&flat) >= alignment_bias(&p) {
            bias_failures += 1;
        }
    }
    println!("max Jensen-gap violation {violation:?}");
    println!("uniform spectrum failed to minimize bias in {bias_failures}/{} draws", a.spectra);

    let mut worst: f64 = 0.0;
    for _ in 0..a.params {
        let d = rng.random_range(2..=8);
        let p = TheoryParams::new(
            random_spectrum(d, rng.random_range(1.0..10.0), rng.random()),
            rng.random_range(0.05..2.0),
            rng.random_range(0.5..4.0),
            rng.random_range(0.0..2.0),
        )?;
        let (mean, se) = monte_carlo_param_error(&p, 0, a.trials, rng.random(), ErrorMode::Population)?;
        let closed = alignment_bias(&p) + estimation_variance(&p);
        let z = (mean - closed).abs() / se.max(f64::MIN_POSITIVE);
        println!("d={d} closed form {closed:.6} sampled {mean:.6} ± {se:.6} ({z:.2} se)");
        worst = worst.max(z);
    }
    println!("largest deviation {worst:.2} standard errors");
    if violation <= 1e-12 && bias_failures == 0 && worst <= 3.0 {
        Ok(())
    } else {
        Err(Failure(EXIT_NUMERICAL, "theory checks failed".into()))
    }
}
