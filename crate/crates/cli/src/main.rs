//! Command-line surface: simulation, estimation, the matching decision,
//! Monte Carlo verification of the closed forms, bias correction, and
//! the variance-tradeoff region scan.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use matchdid::decision::{decide, GuidelineConfig};
use matchdid::dgp::{monte_carlo_estimates, simulate, CanonicalParams};
use matchdid::error::Error;
use matchdid::estimators::{estimate, estimate_classic, EstimateResult, EstimatorKind};
use matchdid::matching::{match_panel, MatchMethod, MatchSpec};
use matchdid::oracle::{
    bias_generalized, variance_canonical, variance_generalized, variance_tradeoff_conditions,
};
use matchdid::panel::PanelData;
use matchdid::plugin::{bias_correct, estimate_moments, PluginReport};
use matchdid::report::{decision_to_json, render_table};
use matchdid::stats::{mean, sample_variance};
use matchdid::REPORT_SCHEMA_VERSION;

/// Environment variable overriding the worker thread count.
const THREADS_ENV: &str = "MATCHDID_THREADS";

#[derive(Parser)]
#[command(name = "matchdid", version, about = "Matching-before-DiD toolkit")]
struct Cli {
    /// Worker threads (0 = automatic). The MATCHDID_THREADS environment
    /// variable takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel CSV from a structural parameter file.
    Simulate(SimulateArgs),
    /// Point estimates plus plug-in bias/variance/MSE for a panel.
    Estimate(EstimateArgs),
    /// Run the match-or-not guideline with bootstrap standard errors.
    Decide(DecideArgs),
    /// Compare closed-form moments against Monte Carlo simulation.
    Verify(VerifyArgs),
    /// Subtract an estimated bias from a point estimate.
    BiasCorrect(BiasCorrectArgs),
    /// Scan the match-on-covariates variance condition over a slope grid.
    Tradeoff(TradeoffArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Structural parameters (TOML).
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output panel CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct MatchArgs {
    /// Matching method: nearest or exact.
    #[arg(long, default_value = "nearest")]
    method: String,
    /// Caliper width; overrides --method when set.
    #[arg(long)]
    caliper: Option<f64>,
    /// Use raw feature scales instead of pooled z-scores.
    #[arg(long)]
    no_standardize: bool,
}

impl MatchArgs {
    fn method(&self) -> Result<MatchMethod, Error> {
        if let Some(width) = self.caliper {
            return Ok(MatchMethod::Caliper { width });
        }
        match self.method.as_str() {
            "nearest" => Ok(MatchMethod::NearestNeighbor),
            "exact" => Ok(MatchMethod::Exact),
            other => Err(Error::Config(format!(
                "unknown matching method '{other}' (expected nearest or exact)"
            ))),
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// Panel CSV path.
    #[arg(long)]
    panel: PathBuf,
    #[command(flatten)]
    matching: MatchArgs,
    /// Write the JSON report here (stdout summary always printed).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecideArgs {
    #[arg(long)]
    panel: PathBuf,
    #[command(flatten)]
    matching: MatchArgs,
    /// Assert parallel trends on domain knowledge (step 1 short-circuit).
    #[arg(long)]
    pt_holds: bool,
    /// Relative tolerance under which two MSEs count as similar.
    #[arg(long, default_value_t = 0.10)]
    mse_tol: f64,
    /// Treated-unit count at which the bias criterion replaces the
    /// variance criterion.
    #[arg(long, default_value_t = 1000)]
    large_sample_threshold: usize,
    /// Bootstrap replications (0 disables standard errors).
    #[arg(long, default_value_t = 5000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the decision JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Structural parameters (TOML).
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative tolerance on variances.
    #[arg(long, default_value_t = 0.05)]
    var_tol: f64,
    /// Bias tolerance in Monte Carlo standard errors.
    #[arg(long, default_value_t = 3.0)]
    bias_tol_se: f64,
    /// Write the JSON comparison report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BiasCorrectArgs {
    #[arg(long)]
    tau: f64,
    #[arg(long)]
    bias: f64,
}

#[derive(Args)]
struct TradeoffArgs {
    /// Univariate two-period parameters (TOML).
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    n1: usize,
    #[arg(long)]
    n0: usize,
    /// Grid bounds and resolution for the post-period slope deltas.
    #[arg(long, default_value_t = -1.0)]
    grid_min: f64,
    #[arg(long, default_value_t = 1.0)]
    grid_max: f64,
    #[arg(long, default_value_t = 21)]
    grid_steps: usize,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    // Usage problems exit 1; --help and --version exit 0.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(cli.threads);
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Decide(args) => cmd_decide(args),
        Command::Verify(args) => cmd_verify(args),
        Command::BiasCorrect(args) => cmd_bias_correct(args),
        Command::Tradeoff(args) => cmd_tradeoff(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, Error> {
    let params = matchdid::io::load_dgp_params(&args.params)?;
    let report = matchdid::dgp::validate_params(&params);
    if !report.is_valid() {
        return Err(Error::InvalidParams(report.violations.join("; ")));
    }
    let panel = simulate(&params, args.seed)?;
    matchdid::io::write_panel(&panel, &args.out)?;
    let s = panel.summary();
    println!(
        "wrote {}: n = {}, treated = {}, controls = {}, T = {}, covariates = {}",
        args.out.display(),
        s.n,
        s.n_treated,
        s.n_control,
        s.t_pre,
        s.n_covariates
    );
    Ok(ExitCode::SUCCESS)
}

/// JSON envelope for the estimate subcommand.
#[derive(Serialize)]
struct EstimateReport {
    schema_version: u32,
    estimates: Vec<EstimateResult>,
    plugin: PluginReport,
}

fn load_panel_logged(path: &std::path::Path) -> Result<PanelData, Error> {
    let panel = matchdid::io::load_panel(path)?;
    let s = panel.summary();
    eprintln!(
        "loaded {}: n = {}, treated = {}, controls = {}, T = {}, covariates = {}",
        path.display(),
        s.n,
        s.n_treated,
        s.n_control,
        s.t_pre,
        s.n_covariates
    );
    Ok(panel)
}

fn cmd_estimate(args: EstimateArgs) -> Result<ExitCode, Error> {
    let panel = load_panel_logged(&args.panel)?;
    let method = args.matching.method()?;
    let standardize = !args.matching.no_standardize;
    let mut estimates = vec![estimate_classic(&panel)?];
    for kind in [EstimatorKind::MatchedX, EstimatorKind::MatchedXY] {
        if kind == EstimatorKind::MatchedX && panel.n_covariates() == 0 {
            eprintln!("matched_x skipped: panel has no covariate columns");
            continue;
        }
        let spec = MatchSpec {
            features: kind.match_features().unwrap(),
            method,
            standardize,
        };
        let assignment = match_panel(&panel, &spec)?;
        estimates.push(estimate(&panel, kind, Some(&assignment))?);
    }
    for est in &estimates {
        println!(
            "{:<12} tau_hat = {:+.6}  (n1 = {}, n0/matched = {})",
            est.kind.label(),
            est.tau_hat,
            est.n1,
            est.n0_or_ntilde
        );
    }
    let plugin = estimate_moments(&panel)?;
    for kind in EstimatorKind::ALL {
        let m = plugin.per_estimator.get(kind);
        println!(
            "{:<12} bias_hat = {:+.6}  sv_hat = {:.6}  mse_hat = {:.6}",
            kind.label(),
            m.bias,
            m.var_full.sqrt(),
            m.mse
        );
    }
    let report = EstimateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        estimates,
        plugin,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("cannot serialize report: {e}")))?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_decide(args: DecideArgs) -> Result<ExitCode, Error> {
    let panel = load_panel_logged(&args.panel)?;
    let config = GuidelineConfig {
        pt_asserted: args.pt_holds,
        mse_similarity_rel_tol: args.mse_tol,
        large_sample_threshold: args.large_sample_threshold,
        bootstrap_reps: args.reps,
        seed: args.seed,
        match_method: args.matching.method()?,
        standardize_features: !args.matching.no_standardize,
    };
    let decision = decide(&panel, &config)?;
    print!("{}", render_table(&decision));
    println!("chosen strategy: {}", decision.chosen.label());
    if let Some(tau) = decision.bias_corrected_tau {
        println!("bias-corrected effect: {tau:.6}");
    }
    for w in &decision.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = &args.out {
        std::fs::write(path, decision_to_json(&decision)? + "\n")?;
    }
    Ok(ExitCode::SUCCESS)
}

/// One theory-vs-Monte-Carlo comparison row.
#[derive(Serialize)]
struct VerifyRow {
    estimator: String,
    quantity: String,
    theory: f64,
    monte_carlo: f64,
    tolerance: f64,
    pass: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    schema_version: u32,
    reps: usize,
    seed: u64,
    n1: usize,
    n0: usize,
    rows: Vec<VerifyRow>,
    all_pass: bool,
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, Error> {
    let params = matchdid::io::load_dgp_params(&args.params)?;
    let n1 = (((params.n_units as f64) * params.p_treated).round() as usize).max(2);
    let n0 = params.n_units - n1;
    let bias = bias_generalized(&params)?;
    let var = variance_generalized(&params, n1, n0)?;

    let mut rows = Vec::new();
    for kind in EstimatorKind::ALL {
        let draws = monte_carlo_estimates(&params, kind, n1, n0, args.reps, args.seed)?;
        let mc_mean = mean(&draws);
        let mc_var = sample_variance(&draws);
        let mc_se = (mc_var / draws.len() as f64).sqrt();

        let theory_bias = bias.get(kind);
        let bias_tol = args.bias_tol_se * mc_se;
        rows.push(VerifyRow {
            estimator: kind.label().to_string(),
            quantity: "bias".to_string(),
            theory: theory_bias,
            monte_carlo: mc_mean - params.tau,
            tolerance: bias_tol,
            pass: (mc_mean - params.tau - theory_bias).abs() <= bias_tol,
        });

        let theory_var = var.get(kind).full;
        rows.push(VerifyRow {
            estimator: kind.label().to_string(),
            quantity: "variance".to_string(),
            theory: theory_var,
            monte_carlo: mc_var,
            tolerance: args.var_tol * theory_var,
            pass: (mc_var - theory_var).abs() <= args.var_tol * theory_var,
        });
    }
    let all_pass = rows.iter().all(|r| r.pass);
    println!(
        "{:<12} {:<9} {:>14} {:>14} {:>12}  result",
        "estimator", "quantity", "theory", "monte_carlo", "tolerance"
    );
    for r in &rows {
        println!(
            "{:<12} {:<9} {:>14.6} {:>14.6} {:>12.6}  {}",
            r.estimator,
            r.quantity,
            r.theory,
            r.monte_carlo,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    let report = VerifyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        reps: args.reps,
        seed: args.seed,
        n1,
        n0,
        rows,
        all_pass,
    };
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("cannot serialize report: {e}")))?;
        std::fs::write(path, json + "\n")?;
    }
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_bias_correct(args: BiasCorrectArgs) -> Result<ExitCode, Error> {
    println!("{:.3}", bias_correct(args.tau, args.bias));
    Ok(ExitCode::SUCCESS)
}

fn cmd_tradeoff(args: TradeoffArgs) -> Result<ExitCode, Error> {
    let base: CanonicalParams = matchdid::io::load_canonical_params(&args.params)?;
    if args.grid_steps < 2 || !(args.grid_max > args.grid_min) {
        return Err(Error::Config(
            "need grid_max > grid_min and at least 2 steps".into(),
        ));
    }
    let mut out = String::from("delta_theta,delta_x,lhs,rhs,match_x_better,v_did,v_didx,v_didxy\n");
    let step = (args.grid_max - args.grid_min) / (args.grid_steps - 1) as f64;
    for i in 0..args.grid_steps {
        for j in 0..args.grid_steps {
            let dth = args.grid_min + step * i as f64;
            let dx = args.grid_min + step * j as f64;
            let mut c = base;
            c.beta_theta[1] = c.beta_theta[0] + dth;
            c.beta_x[1] = c.beta_x[0] + dx;
            let rep = variance_tradeoff_conditions(&c, args.n1, args.n0)?;
            let (v_did, v_didx, v_didxy) = variance_canonical(&c, args.n1, args.n0)?;
            out.push_str(&format!(
                "{dth},{dx},{},{},{},{},{},{}\n",
                rep.lhs, rep.rhs, rep.match_x_better, v_did, v_didx, v_didxy
            ));
        }
    }
    match &args.out {
        Some(path) => std::fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(ExitCode::SUCCESS)
}
