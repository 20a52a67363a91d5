//! Subcommands binding the library together: dataset generation, training,
//! trajectory analysis, spherical flow integration, and gradient checks.
//! Everything is file-based; outputs are CSV/JSON meant for external
//! plotting.

use crate::criticality::{self, NetModel};
use crate::data;
use crate::dynamics;
use crate::error::{Error, Result};
use crate::net::{
    self, conservative_grad, KinkSelection, NetSpec, Sample, WeightVector,
};
use crate::optim::{self, ExperimentConfig, InitSpec, StepRecord};
use crate::vector;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Overrides the default output directory when set.
pub const OUT_DIR_ENV: &str = "MARGINFLOW_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "marginflow",
    version,
    about = "Train homogeneous networks with constant-step (S)GD and measure margin dynamics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labeled dataset (CSV + metadata JSON)
    GenData(GenDataArgs),
    /// Run (S)GD per a JSON config; writes records, snapshots, manifest
    Train(TrainArgs),
    /// Post-hoc analysis of a training run: growth fit, step decomposition,
    /// criticality residuals
    Analyze(AnalyzeArgs),
    /// Integrate the Euler discretization of the spherical margin flow
    Flow(FlowArgs),
    /// Check the backprop field: Euler identity, homogeneity, finite
    /// differences
    CheckGrad(CheckGradArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(subcommand)]
    pub generator: Generator,
}

#[derive(Subcommand, Debug)]
pub enum Generator {
    /// Linearly separable points in a ball with a certified margin slab
    Linear {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        margin: f64,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Four XOR-labeled clusters, separable by a width-4 ReLU witness
    XorRing {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset CSV
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// The config the run was trained with
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding records.csv and snapshots.csv
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Output directory (defaults to the run directory)
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FlowArgs {
    /// Config providing the network spec and kink selection
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Initial direction as comma-separated floats; random when omitted
    #[arg(long)]
    pub u0: Option<String>,
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    #[arg(long, default_value_t = 100_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub stop_tol: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub active_tol: f64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckGradArgs {
    #[arg(long, default_value_t = 200)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt the computed gradient before checking (for testing the
    /// checker itself)
    #[arg(long, hide = true, default_value_t = false)]
    pub inject_fault: bool,
}

/// Provenance of a training run; the hashes make reruns verifiable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: String,
    pub dataset_path: String,
    pub output_dir: String,
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub created_unix: u64,
    pub tool_version: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn resolve_out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let config: ExperimentConfig = serde_json::from_str(&text)?;
    Ok(config)
}

/// Runs a parsed command; the caller maps errors to exit codes.
pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Flow(args) => cmd_flow(args),
        Command::CheckGrad(args) => cmd_check_grad(args),
    }
}

/// Exit code for a command error.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NumericalAbort { .. } | Error::GradCheckFailed { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let (dataset, out_dir) = match args.generator {
        Generator::Linear {
            n,
            d,
            margin,
            radius,
            seed,
            out_dir,
        } => (
            data::gen_linear_separable(seed, n, d, margin, radius)?,
            resolve_out_dir(&out_dir),
        ),
        Generator::XorRing { n, seed, out_dir } => {
            (data::gen_xor_ring(seed, n)?, resolve_out_dir(&out_dir))
        }
    };
    std::fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join("dataset.csv");
    dataset.save_csv(&csv_path)?;
    let meta_path = out_dir.join("dataset_meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&dataset.meta)?)?;
    println!("wrote {} samples to {}", dataset.len(), csv_path.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let dataset = data::load_csv(&args.data)?;
    let out_dir = resolve_out_dir(&args.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    let traj = match optim::run(&config, &dataset) {
        Ok(t) => t,
        Err(e @ Error::NumericalAbort { .. }) => {
            // diagnostic JSON so the failure is machine-readable
            if let Error::NumericalAbort { k, norm, margin } = &e {
                let diag = serde_json::json!({
                    "error": "numerical_abort",
                    "iteration": k,
                    "last_norm": norm,
                    "last_normalized_margin": margin,
                });
                let _ = std::fs::write(
                    out_dir.join("abort.json"),
                    serde_json::to_string_pretty(&diag)?,
                );
                eprintln!("{diag}");
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    traj.save(&out_dir.join("records.csv"), &out_dir.join("snapshots.csv"))?;

    let manifest = RunManifest {
        config_path: args.config.display().to_string(),
        dataset_path: args.data.display().to_string(),
        output_dir: out_dir.display().to_string(),
        config_sha256: sha256_file(&args.config)?,
        dataset_sha256: sha256_file(&args.data)?,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    match traj.k_sep {
        Some(k) => println!("k_sep: {k}"),
        None => println!("k_sep: none (separation not detected)"),
    }
    let last = traj.records.last().expect("run always records the final state");
    println!("final_normalized_margin: {:.17e}", last.normalized_margin);
    Ok(())
}

#[derive(Debug, Serialize)]
struct RemainderRow {
    k: u64,
    gamma_bar: f64,
    g_bar_s_norm: f64,
    eta_bar_norm: f64,
    r_norm: f64,
}

#[derive(Debug, Serialize)]
struct TrendFit {
    slope: f64,
    intercept: f64,
    r_squared: f64,
}

#[derive(Debug, Serialize)]
struct GammaBarSummary {
    fraction_increasing: f64,
    power_exponent: f64,
    r_squared: f64,
}

#[derive(Debug, Serialize)]
struct FinalState {
    k: u64,
    normalized_margin: f64,
    criticality_residual: Option<f64>,
    active_set_size: Option<usize>,
    kkt_residual: Option<f64>,
}

#[derive(Debug, Serialize)]
struct AnalysisSummary {
    k_sep: Option<u64>,
    growth_fit: Option<dynamics::GrowthFit>,
    loss_decay: Option<TrendFit>,
    gamma_bar: Option<GammaBarSummary>,
    final_state: Option<FinalState>,
    eprime: dynamics::EprimeReport,
    warnings: Vec<String>,
}

/// Fits log gamma_bar against log k on post-separation records.
fn gamma_bar_summary(records: &[StepRecord], k_sep: u64) -> Option<GammaBarSummary> {
    let post: Vec<&StepRecord> = records
        .iter()
        .filter(|r| r.k > k_sep.max(0) && r.k > 0)
        .collect();
    if post.len() < 3 {
        return None;
    }
    let mut increasing = 0usize;
    for pair in post.windows(2) {
        if pair[1].log_gamma_bar > pair[0].log_gamma_bar {
            increasing += 1;
        }
    }
    let xs: Vec<f64> = post.iter().map(|r| (r.k as f64).ln()).collect();
    let ys: Vec<f64> = post.iter().map(|r| r.log_gamma_bar).collect();
    let (slope, _, r2) = dynamics::linear_regression(&xs, &ys);
    Some(GammaBarSummary {
        fraction_increasing: increasing as f64 / (post.len() - 1) as f64,
        power_exponent: slope,
        r_squared: r2,
    })
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let dataset = data::load_csv(&args.data)?;
    let out_dir = args.out_dir.clone().unwrap_or_else(|| args.run_dir.clone());
    std::fs::create_dir_all(&out_dir)?;

    let records = optim::read_records_csv(&args.run_dir.join("records.csv"))?;
    if records.is_empty() {
        return Err(Error::InvalidConfig("records.csv is empty".into()));
    }
    let snapshots_path = args.run_dir.join("snapshots.csv");
    let snapshots = if snapshots_path.exists() {
        optim::read_snapshots_csv(&snapshots_path, &config.spec)?
    } else {
        Vec::new()
    };

    let mut warnings = Vec::new();
    let k_sep = optim::detect_separation(&records);
    let depth = config.spec.depth();

    let growth_fit = match k_sep {
        Some(ks) => {
            let window = dynamics::default_growth_window(&records, ks);
            match dynamics::fit_log_growth(&records, depth, window, k_sep) {
                Ok(f) => Some(f),
                Err(e) => {
                    warnings.push(format!("growth fit unavailable: {e}"));
                    None
                }
            }
        }
        None => {
            warnings.push("not applicable (no separation detected)".into());
            None
        }
    };

    let loss_decay = k_sep.map(|ks| {
        let post: Vec<&StepRecord> =
            records.iter().filter(|r| r.k > ks && r.k > 0).collect();
        let xs: Vec<f64> = post.iter().map(|r| (r.k as f64).ln()).collect();
        let ys: Vec<f64> = post.iter().map(|r| r.log_loss).collect();
        let (slope, intercept, r_squared) = dynamics::linear_regression(&xs, &ys);
        TrendFit {
            slope,
            intercept,
            r_squared,
        }
    });

    let gamma_bar = k_sep.and_then(|ks| gamma_bar_summary(&records, ks));

    // per-snapshot-pair decomposition of the normalized update
    let mut rows: Vec<RemainderRow> = Vec::new();
    for pair in snapshots.windows(2) {
        let (ka, wa) = &pair[0];
        let (kb, wb) = &pair[1];
        if kb - ka != 1 {
            continue;
        }
        let batch: Option<Vec<usize>> = if config.batch_size < dataset.len() {
            let mut rng = optim::step_rng(config.seed, *ka);
            Some(optim::sample_batch(&mut rng, dataset.len(), config.batch_size)?)
        } else {
            None
        };
        match dynamics::decomposition_at(
            &config.spec,
            *ka,
            wa,
            wb,
            &dataset,
            config.loss,
            config.kink,
            config.schedule.gamma(*ka),
            batch.as_deref(),
        ) {
            Ok(dec) => rows.push(RemainderRow {
                k: dec.k,
                gamma_bar: dec.gamma_bar,
                g_bar_s_norm: vector::norm(&dec.g_bar_s),
                eta_bar_norm: vector::norm(&dec.eta_bar),
                r_norm: vector::norm(&dec.r),
            }),
            Err(e) => warnings.push(format!("decomposition at k={ka} skipped: {e}")),
        }
    }
    if snapshots.len() < 2 {
        warnings.push("no snapshot pairs: remainder series unavailable".into());
    }

    let final_state = match snapshots.last() {
        Some((k, w)) => {
            let u = dynamics::normalize(&w.data)?;
            let model = NetModel::new(&config.spec, &dataset, config.kink);
            let crit = criticality::criticality_residual(&model, &u, 1e-6, 1e-10)?;
            let margin = records.last().unwrap().normalized_margin;
            let kkt = match criticality::kkt_residual(
                &config.spec,
                &dataset,
                &u,
                config.kink,
                1e-6,
            ) {
                Ok(rep) => Some(rep.residual),
                Err(e) => {
                    warnings.push(format!("kkt residual unavailable: {e}"));
                    None
                }
            };
            Some(FinalState {
                k: *k,
                normalized_margin: margin,
                criticality_residual: Some(crit.residual),
                active_set_size: Some(crit.active.len()),
                kkt_residual: kkt,
            })
        }
        None => {
            warnings.push("no snapshots: criticality checks unavailable".into());
            None
        }
    };

    let eprime = dynamics::eprime_diagnostics(&records, depth, config.schedule);

    let summary = AnalysisSummary {
        k_sep,
        growth_fit,
        loss_decay,
        gamma_bar,
        final_state,
        eprime,
        warnings,
    };
    std::fs::write(
        out_dir.join("analysis.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    let mut csv = String::from("k,gamma_bar,g_bar_s_norm,eta_bar_norm,r_norm\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            row.k, row.gamma_bar, row.g_bar_s_norm, row.eta_bar_norm, row.r_norm
        ));
    }
    std::fs::write(out_dir.join("remainders.csv"), csv)?;
    println!(
        "analysis written to {}",
        out_dir.join("analysis.json").display()
    );
    Ok(())
}

fn cmd_flow(args: FlowArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let dataset = data::load_csv(&args.data)?;
    let out_dir = resolve_out_dir(&args.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    let u0 = match &args.u0 {
        Some(text) => {
            let parsed: std::result::Result<Vec<f64>, _> =
                text.split(',').map(|s| s.trim().parse::<f64>()).collect();
            parsed.map_err(|_| Error::InvalidConfig(format!("bad --u0 \"{text}\"")))?
        }
        None => optim::init_weights(&config.spec, config.seed, InitSpec::Scale { scale: 1.0 }).data,
    };
    if u0.len() != config.spec.param_count() {
        return Err(Error::WeightLengthMismatch {
            expected: config.spec.param_count(),
            got: u0.len(),
        });
    }

    let model = NetModel::new(&config.spec, &dataset, config.kink);
    let res = criticality::euler_di_flow(
        &model,
        &u0,
        args.h,
        args.steps,
        args.stop_tol,
        args.active_tol,
    )?;

    let mut csv = String::from("step,margin,residual\n");
    for (i, r) in res.residuals.iter().enumerate() {
        csv.push_str(&format!("{},{:.17e},{:.17e}\n", i, res.margins[i], r));
    }
    std::fs::write(out_dir.join("flow.csv"), csv)?;
    println!("steps_taken: {}", res.steps_taken);
    println!("converged: {}", res.converged);
    println!(
        "final_margin: {:.17e}",
        res.margins.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// One random gradient-check case.
fn check_case(
    rng: &mut ChaCha12Rng,
    inject_fault: bool,
) -> Result<(f64, f64, f64)> {
    use crate::net::Activation;
    let pool: [NetSpec; 6] = [
        NetSpec::new(vec![3, 1], Activation::Linear)?,
        NetSpec::new(vec![2, 16, 1], Activation::Relu)?,
        NetSpec::new(vec![2, 8, 1], Activation::LeakyRelu { slope: 0.1 })?,
        NetSpec::new(vec![3, 4, 4, 1], Activation::Relu)?,
        NetSpec::new(vec![2, 3, 3, 3, 1], Activation::Relu)?,
        NetSpec::new(vec![2, 5, 1], Activation::Relu)?,
    ];
    let spec = pool[rng.gen_range(0..pool.len())].clone();
    let depth = spec.depth();
    let (klo, khi) = spec.activation.kink_range();
    let kink = KinkSelection::new(rng.gen_range(klo..=khi));
    let w = WeightVector::from_flat(
        &spec,
        (0..spec.param_count())
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect(),
    )?;
    let x: Vec<f64> = (0..spec.input_dim())
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    let sample = Sample::new(x.clone(), if rng.gen_bool(0.5) { 1.0 } else { -1.0 })?;

    let mut g = conservative_grad(&spec, &w, &sample, kink)?;
    if inject_fault {
        g.data[0] += 1e-3;
    }

    // Euler identity <g, w> = L p(w)
    let p = net::signed_output(&spec, &w, &sample)?;
    let lhs = vector::dot(&g.data, &w.data);
    let rhs = depth as f64 * p;
    let euler_err = (lhs - rhs).abs() / (1.0 + rhs.abs());

    // field homogeneity g(lambda w) = lambda^{L-1} g(w)
    let mut homog_err: f64 = 0.0;
    for lambda in [0.5, 2.0, 10.0] {
        let mut gs = conservative_grad(&spec, &w.scaled(lambda), &sample, kink)?;
        if inject_fault {
            gs.data[0] += 1e-3;
        }
        let factor = lambda.powi(depth as i32 - 1);
        for (a, b) in gs.data.iter().zip(&g.data) {
            let err = (a - factor * b).abs() / (1.0 + (factor * b).abs());
            homog_err = homog_err.max(err);
        }
    }

    // finite differences, only meaningfully off kinks
    let zs = net::hidden_preactivations(&spec, &w, &x)?;
    let off_kink = zs.iter().all(|z| z.abs() > 1e-4);
    let mut fd_err: f64 = 0.0;
    if off_kink {
        let mut wp = w.clone();
        for i in 0..w.len() {
            let h = 1e-6 * (1.0 + w.data[i].abs());
            let orig = wp.data[i];
            wp.data[i] = orig + h;
            let fp = net::signed_output(&spec, &wp, &sample)?;
            wp.data[i] = orig - h;
            let fm = net::signed_output(&spec, &wp, &sample)?;
            wp.data[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - g.data[i]).abs() / (1.0 + g.data[i].abs());
            fd_err = fd_err.max(err);
        }
    }
    Ok((euler_err, homog_err, fd_err))
}

pub struct GradCheckReport {
    pub max_euler_err: f64,
    pub max_homog_err: f64,
    pub max_fd_err: f64,
    pub cases: usize,
}

pub fn run_grad_check(cases: usize, seed: u64, inject_fault: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_euler_err: 0.0,
        max_homog_err: 0.0,
        max_fd_err: 0.0,
        cases,
    };
    for _ in 0..cases {
        let (e, h, f) = check_case(&mut rng, inject_fault)?;
        report.max_euler_err = report.max_euler_err.max(e);
        report.max_homog_err = report.max_homog_err.max(h);
        report.max_fd_err = report.max_fd_err.max(f);
    }
    Ok(report)
}

pub const EULER_THRESHOLD: f64 = 1e-9;
pub const HOMOG_THRESHOLD: f64 = 1e-9;
pub const FD_THRESHOLD: f64 = 1e-5;

fn cmd_check_grad(args: CheckGradArgs) -> Result<()> {
    let report = run_grad_check(args.cases, args.seed, args.inject_fault)?;
    println!("cases: {}", report.cases);
    println!("max_euler_identity_err: {:.3e}", report.max_euler_err);
    println!("max_homogeneity_err: {:.3e}", report.max_homog_err);
    println!("max_finite_difference_err: {:.3e}", report.max_fd_err);
    if report.max_euler_err > EULER_THRESHOLD
        || report.max_homog_err > HOMOG_THRESHOLD
        || report.max_fd_err > FD_THRESHOLD
    {
        return Err(Error::GradCheckFailed {
            euler: report.max_euler_err,
            homog: report.max_homog_err,
            fd: report.max_fd_err,
        });
    }
    println!("ok");
    Ok(())
}
