//! `fleet`: generate fleets, detect anomalous systems, tune λ and compare
//! against ridge fusion.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fleet_core::admm::{run_distributed, AdmmConfig, InProcessBus, LoopbackSocket, Transport};
use fleet_core::baseline::{solve_tikhonov, threshold_report};
use fleet_core::datagen::{default_paper_config, generate_fleet, GenConfig};
use fleet_core::io::{export_csv, read_fleet, write_fleet, DatasetHeader};
use fleet_core::oracle::{brute_force_detect, OracleOptions};
use fleet_core::report::{
    bar_chart_svg, deviation_csv, fmt_f64, ranking_json, trace_csv, tuning_csv, write_text, DatasetInfo, Margin,
    SolutionReport,
};
use fleet_core::solver::{compute_lambda_max, solve_group_lasso, SolverConfig};
use fleet_core::tuning::{log_grid, select_lambda_bic, tune_lambda_for_k};
use fleet_core::{FleetDataset, FleetError, PNorm, Solution};

const EXIT_USAGE: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;
const EXIT_REFUSAL: u8 = 4;

#[derive(Parser)]
#[command(name = "fleet", version, about = "Anomaly detection in fleets of linear systems")]
struct Cli {
    /// Worker threads for the data-parallel kernels.
    #[arg(long, global = true, env = "FLEET_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a fleet and write it to a dataset file.
    Gen(GenArgs),
    /// Run one detection method on a dataset.
    Detect(DetectArgs),
    /// Choose λ for a target anomaly count or by BIC.
    Tune(TuneArgs),
    /// Group lasso versus ridge fusion over a list of weights.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON generator configuration.
    #[arg(long, conflicts_with = "paper_defaults", required_unless_present = "paper_defaults")]
    config: Option<PathBuf>,
    /// Use the built-in 200-system aircraft configuration.
    #[arg(long)]
    paper_defaults: bool,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also export one CSV per system into this directory.
    #[arg(long)]
    csv_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Central,
    Admm,
    Oracle,
    Tikhonov,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportKind {
    Bus,
    Socket,
}

#[derive(Args)]
struct DetectArgs {
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "central")]
    method: Method,
    /// Regularization weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Anomaly count: the oracle's hypothesis size, or the target count
    /// that λ is tuned for when `--lambda` is absent.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    p: u8,
    /// Deviation threshold for flagging ridge-fusion estimates.
    #[arg(long, default_value_t = 1e-8)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "bus")]
    transport: TransportKind,
    /// Initial ADMM penalty.
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// Keep the ADMM penalty fixed.
    #[arg(long)]
    fixed_rho: bool,
    #[arg(long, default_value_t = 1e-4)]
    eps_abs: f64,
    #[arg(long, default_value_t = 1e-3)]
    eps_rel: f64,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Largest number of oracle hypotheses to enumerate.
    #[arg(long)]
    cap: Option<u128>,
    /// How many oracle hypotheses to list in the ranking file.
    #[arg(long, default_value_t = 20)]
    top: usize,
    #[arg(long)]
    out_report: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// ADMM residual trace, or the oracle ranking.
    #[arg(long)]
    out_trace: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    dataset: PathBuf,
    /// Bisect λ until exactly this many systems are flagged.
    #[arg(long, conflicts_with = "bic", required_unless_present = "bic")]
    k: Option<usize>,
    /// Select λ by BIC over a logarithmic grid below λ_max.
    #[arg(long)]
    bic: bool,
    #[arg(long, default_value_t = 30)]
    points: usize,
    /// Smallest grid value as a fraction of λ_max.
    #[arg(long, default_value_t = 1e-3)]
    ratio: f64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    p: u8,
    #[arg(long)]
    out_report: Option<PathBuf>,
    /// Bisection trail or BIC table.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    dataset: PathBuf,
    /// Comma-separated weights applied to both methods.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    lambdas: Vec<f64>,
    /// Also run group lasso tuned to flag this many systems.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    p: u8,
    /// Deviation threshold for counting ridge-fusion bars as nonzero.
    #[arg(long, default_value_t = 1e-8)]
    threshold: f64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Write a bar chart per run.
    #[arg(long)]
    svg: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<FleetError> for Failure {
    fn from(e: FleetError) -> Self {
        let code = match &e {
            FleetError::NonConvergence { .. } => EXIT_NONCONVERGENCE,
            FleetError::Refusal { .. } => EXIT_REFUSAL,
            FleetError::Domain(_) | FleetError::Format(_) | FleetError::Json(_) | FleetError::Io(_) => EXIT_USAGE,
            _ => 1,
        };
        let mut message = e.to_string();
        if let FleetError::Refusal { .. } = e {
            message.push_str(" (raise --cap to enumerate anyway)");
        }
        Self { code, message }
    }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(f) = configure_threads(cli.threads) {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Tune(a) => cmd_tune(&a),
        Command::Compare(a) => cmd_compare(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads(threads: Option<usize>) -> Result<(), Failure> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Failure::usage("--threads must be positive"));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(e.to_string()))?;
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<GenConfig>(&text)
                .map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => default_paper_config(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let fleet = generate_fleet(&cfg)?;
    write_fleet(&a.out, &fleet, Some(&cfg))?;
    if let Some(dir) = &a.csv_dir {
        export_csv(dir, &fleet)?;
    }
    println!("wrote {} ({} systems, m = {})", a.out.display(), fleet.len(), fleet.dim());
    println!("config hash {}", cfg.hash());
    println!("seed {}", cfg.seed);
    println!("anomalies {:?}", cfg.anomaly_tags);
    Ok(0)
}

fn load(path: &Path) -> Result<(FleetDataset, DatasetHeader), Failure> {
    read_fleet(path).map_err(|e| Failure::usage(format!("cannot load {}: {e}", path.display())))
}

fn pnorm(p: u8) -> PNorm {
    if p == 1 {
        PNorm::L1
    } else {
        PNorm::L2
    }
}

fn solve_or_last(r: fleet_core::Result<Solution>) -> Result<(Solution, u8), Failure> {
    match r {
        Ok(s) => Ok((s, 0)),
        Err(FleetError::NonConvergence {
            what,
            iterations,
            residual,
            last: Some(s),
        }) => {
            eprintln!("warning: {what} did not converge after {iterations} iterations (residual {residual:.3e})");
            Ok((*s, EXIT_NONCONVERGENCE))
        }
        Err(e) => Err(e.into()),
    }
}

/// The λ for a group-lasso run: given directly or tuned for `k`.
fn resolve_lambda(fleet: &FleetDataset, lambda: Option<f64>, k: Option<usize>, p: PNorm) -> Result<f64, Failure> {
    match (lambda, k) {
        (Some(l), _) => Ok(l),
        (None, Some(k)) => {
            let t = tune_lambda_for_k(fleet, k, &SolverConfig::new(0.0, p))?;
            println!(
                "tuned lambda {} flags {} systems (target {k}, lambda_max {})",
                fmt_f64(t.lambda),
                t.achieved,
                fmt_f64(t.lambda_max)
            );
            Ok(t.lambda)
        }
        (None, None) => Err(Failure::usage("either --lambda or --k is required")),
    }
}

/// One-based tags, abbreviated past 20 entries.
fn tag_list(zero_based: &[usize]) -> String {
    let shown: Vec<String> = zero_based.iter().take(20).map(|i| (i + 1).to_string()).collect();
    if zero_based.len() > shown.len() {
        format!("[{}, ... {} total]", shown.join(", "), zero_based.len())
    } else {
        format!("[{}]", shown.join(", "))
    }
}

fn print_summary(sol: &Solution) {
    println!(
        "{}: lambda {} flagged {} objective {} iterations {} converged {}",
        sol.diagnostics.method,
        fmt_f64(sol.lambda),
        tag_list(&sol.flagged),
        fmt_f64(sol.objective),
        sol.diagnostics.iterations,
        sol.diagnostics.converged
    );
}

fn write_outputs(
    sol: &Solution,
    header: &DatasetHeader,
    margin: Option<Margin>,
    report: Option<&Path>,
    csv: Option<&Path>,
) -> Result<(), Failure> {
    if let Some(path) = report {
        let mut rep = SolutionReport::new(sol).with_dataset(DatasetInfo::from(header));
        if let Some(m) = margin {
            rep = rep.with_margin(m);
        }
        write_text(path, &rep.to_json()?)?;
    }
    if let Some(path) = csv {
        write_text(path, &deviation_csv(sol))?;
    }
    Ok(())
}

fn cmd_detect(a: &DetectArgs) -> Outcome {
    let (fleet, header) = load(&a.dataset)?;
    let p = pnorm(a.p);
    let (sol, code, margin) = match a.method {
        Method::Central => {
            let lambda = resolve_lambda(&fleet, a.lambda, a.k, p)?;
            let mut cfg = SolverConfig::new(lambda, p);
            if let Some(n) = a.max_iterations {
                cfg.max_iterations = n;
            }
            let (sol, code) = solve_or_last(solve_group_lasso(&fleet, &cfg))?;
            let margin = Margin::from(&threshold_report(&sol, sol.support_tolerance));
            (sol, code, Some(margin))
        }
        Method::Admm => {
            let lambda = resolve_lambda(&fleet, a.lambda, a.k, p)?;
            let mut cfg = AdmmConfig {
                rho: a.rho,
                adaptive_rho: !a.fixed_rho,
                eps_abs: a.eps_abs,
                eps_rel: a.eps_rel,
                ..AdmmConfig::default()
            };
            if let Some(n) = a.max_iterations {
                cfg.max_iterations = n;
            }
            let transport: Box<dyn Transport> = match a.transport {
                TransportKind::Bus => Box::new(InProcessBus::new()),
                TransportKind::Socket => Box::new(LoopbackSocket::connect(fleet.len())?),
            };
            let (sol, code) = solve_or_last(run_distributed(&fleet, lambda, p, &cfg, transport.as_ref()))?;
            println!("messages sent {}", transport.sent());
            if let Some(path) = &a.out_trace {
                write_text(path, &trace_csv(&sol.diagnostics))?;
            }
            let margin = Margin::from(&threshold_report(&sol, sol.support_tolerance));
            (sol, code, Some(margin))
        }
        Method::Oracle => {
            let k = a.k.ok_or_else(|| Failure::usage("--method oracle requires --k"))?;
            let mut opts = OracleOptions::default();
            if let Some(cap) = a.cap {
                opts.cap = cap;
            }
            let result = brute_force_detect(&fleet, k, opts)?;
            if let Some(path) = &a.out_trace {
                write_text(path, &ranking_json(&result, a.top)?)?;
            }
            println!("hypotheses evaluated {}", result.ranking.len());
            (result.best.to_solution(fleet.len(), p), 0, None)
        }
        Method::Tikhonov => {
            let lambda = a
                .lambda
                .ok_or_else(|| Failure::usage("--method tikhonov requires --lambda"))?;
            let sol = solve_tikhonov(&fleet, lambda, a.threshold)?;
            let margin = Margin::from(&threshold_report(&sol, a.threshold));
            (sol, 0, Some(margin))
        }
    };
    print_summary(&sol);
    write_outputs(&sol, &header, margin, a.out_report.as_deref(), a.out_csv.as_deref())?;
    Ok(code)
}

fn cmd_tune(a: &TuneArgs) -> Outcome {
    let (fleet, header) = load(&a.dataset)?;
    let p = pnorm(a.p);
    let cfg = SolverConfig::new(0.0, p);
    let sol = if let Some(k) = a.k {
        let t = tune_lambda_for_k(&fleet, k, &cfg)?;
        println!(
            "lambda {} flags {} systems (target {k}, lambda_max {}, {} bisection steps)",
            fmt_f64(t.lambda),
            t.achieved,
            fmt_f64(t.lambda_max),
            t.trail.len()
        );
        if let Some(path) = &a.out_csv {
            let mut csv = String::from("lambda,k\n");
            for (l, n) in &t.trail {
                csv.push_str(&format!("{},{n}\n", fmt_f64(*l)));
            }
            write_text(path, &csv)?;
        }
        t.solution
    } else {
        if a.points == 0 || !(a.ratio > 0.0 && a.ratio < 1.0) {
            return Err(Failure::usage("--points must be positive and --ratio in (0, 1)"));
        }
        let lm = compute_lambda_max(&fleet, p)?;
        let grid = log_grid(lm, a.points, a.ratio);
        let sel = select_lambda_bic(&fleet, &grid, &cfg)?;
        println!(
            "BIC selects lambda {} with {} flagged (lambda_max {})",
            fmt_f64(sel.lambda),
            sel.solution.flagged.len(),
            fmt_f64(lm)
        );
        if let Some(path) = &a.out_csv {
            write_text(path, &tuning_csv(&sel.table))?;
        }
        sel.solution
    };
    print_summary(&sol);
    write_outputs(&sol, &header, None, a.out_report.as_deref(), None)?;
    Ok(0)
}

struct CompareRun {
    method: &'static str,
    lambda: f64,
    result: fleet_core::Result<(Solution, f64)>,
}

fn cmd_compare(a: &CompareArgs) -> Outcome {
    if a.lambdas.is_empty() && a.k.is_none() {
        return Err(Failure::usage("--lambdas must list at least one weight"));
    }
    if let Some(bad) = a.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Failure::usage(format!("invalid weight {bad}")));
    }
    let (fleet, _) = load(&a.dataset)?;
    let p = pnorm(a.p);
    let mut runs = Vec::new();
    if let Some(k) = a.k {
        let r = tune_lambda_for_k(&fleet, k, &SolverConfig::new(0.0, p));
        let lambda = r.as_ref().map_or(f64::NAN, |t| t.lambda);
        runs.push(CompareRun {
            method: "group-lasso-tuned",
            lambda,
            result: r.map(|t| {
                let tol = t.solution.support_tolerance;
                (t.solution, tol)
            }),
        });
    }
    for &lambda in &a.lambdas {
        runs.push(CompareRun {
            method: "group-lasso",
            lambda,
            result: solve_group_lasso(&fleet, &SolverConfig::new(lambda, p)).map(|s| {
                let tol = s.support_tolerance;
                (s, tol)
            }),
        });
    }
    for &lambda in &a.lambdas {
        runs.push(CompareRun {
            method: "tikhonov",
            lambda,
            result: solve_tikhonov(&fleet, lambda, a.threshold).map(|s| (s, a.threshold)),
        });
    }

    std::fs::create_dir_all(&a.out_dir).map_err(FleetError::from)?;
    let mut summary = String::from("method,lambda,nonzero,flagged,smallest_flagged,largest_unflagged,margin_ratio,error\n");
    let mut ok = 0;
    for run in &runs {
        let stem = format!("{}_lambda_{}", run.method, fmt_f64(run.lambda));
        match &run.result {
            Ok((sol, threshold)) => {
                ok += 1;
                let t = threshold_report(sol, *threshold);
                let opt = |v: Option<f64>| v.map_or(String::new(), fmt_f64);
                let tags: Vec<String> = t.flagged.iter().map(|i| (i + 1).to_string()).collect();
                summary.push_str(&format!(
                    "{},{},{},{},{},{},{},\n",
                    run.method,
                    fmt_f64(run.lambda),
                    t.flagged.len(),
                    tags.join(" "),
                    opt(t.smallest_flagged),
                    opt(t.largest_unflagged),
                    opt(t.margin_ratio),
                ));
                write_text(&a.out_dir.join(format!("{stem}.csv")), &deviation_csv(sol))?;
                if a.svg {
                    let title = format!("{} (lambda = {})", run.method, fmt_f64(run.lambda));
                    let svg = bar_chart_svg(&title, &sol.deviations, &t.flagged, Some(*threshold));
                    write_text(&a.out_dir.join(format!("{stem}.svg")), &svg)?;
                }
                println!(
                    "{:<18} lambda {:>12} nonzero {:>4} flagged {}",
                    run.method,
                    fmt_f64(run.lambda),
                    t.flagged.len(),
                    tag_list(&t.flagged)
                );
            }
            Err(e) => {
                let msg = e.to_string().replace([',', '\n'], " ");
                summary.push_str(&format!("{},{},,,,,,{msg}\n", run.method, fmt_f64(run.lambda)));
                eprintln!("{} at lambda {} failed: {e}", run.method, fmt_f64(run.lambda));
            }
        }
    }
    write_text(&a.out_dir.join("summary.csv"), &summary)?;
    if ok == 0 {
        return Err(Failure {
            code: 1,
            message: "every run failed".into(),
        });
    }
    Ok(0)
}
