use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fpp_opf::analysis::{
    report_from_json, report_to_json, slack_csv, solve, validate_report, voltage_csv,
    warm_start_from_report, RunStatus, SolveReport,
};
use fpp_opf::case::{parse_case, write_json, write_matpower, Case};
use fpp_opf::driver::{Mode, SolverOptions};
use fpp_opf::error::OpfError;
use fpp_opf::problem::{assemble, OpfProblem};

/// Multi-phase AC optimal power flow with infeasibility diagnosis.
#[derive(Parser)]
#[command(name = "fppopf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find a feasible point and improve its cost.
    Solve(RunArgs),
    /// Rank the constraints that block feasibility.
    Diagnose(RunArgs),
    /// Re-check a saved report against its case (exit 0 when it holds).
    Validate { case: PathBuf, report: PathBuf },
    /// Convert between MATPOWER (.m) and JSON (.json) case files.
    Convert { input: PathBuf, output: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    case: PathBuf,
    #[arg(long)]
    eps1: Option<f64>,
    #[arg(long)]
    eps2: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Start from the voltages of a previous report.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[arg(long)]
    tol_conic: Option<f64>,
    /// Directory for report.json, voltages.csv and slacks.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print one line per iteration to stderr.
    #[arg(long)]
    trace: bool,
    /// Worker threads for parallel work.
    #[arg(long)]
    jobs: Option<usize>,
}

enum Failure {
    Input(String),
    Run(String),
}

impl From<OpfError> for Failure {
    fn from(e: OpfError) -> Self {
        match e {
            OpfError::Conic(_) | OpfError::InfeasibleStart(_) => Failure::Run(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

fn load(path: &Path) -> Result<(Case, OpfProblem), Failure> {
    let case = parse_case(path)?;
    let problem = assemble(case.net.clone(), case.cost.clone())?;
    Ok((case, problem))
}

fn read_report(path: &Path) -> Result<SolveReport, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    report_from_json(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn run(args: RunArgs, mode: Mode) -> Result<i32, Failure> {
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Failure::Input(e.to_string()))?;
    }
    let (case, problem) = load(&args.case)?;
    let mut opts = SolverOptions { mode, ..SolverOptions::default() };
    if let Some(x) = args.eps1 {
        opts.eps1 = x;
        opts.eps_voltage = x;
    }
    if let Some(x) = args.eps2 {
        opts.eps2 = x;
    }
    if let Some(x) = args.max_iter {
        opts.max_iter = x;
    }
    if let Some(x) = args.tol_conic {
        opts.conic_tol = x;
    }
    if let Some(path) = &args.warm_start {
        opts.initial = warm_start_from_report(&problem, &read_report(path)?)?;
    }
    opts.validate()?;

    let report = solve(&case.name, &problem, &opts)?;
    if args.trace {
        for rec in &report.trace {
            eprintln!("{rec}");
        }
    }
    print_summary(&report, &case);
    if let Some(dir) = &args.out {
        let io = |e: std::io::Error| Failure::Input(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("report.json"), report_to_json(&report)?).map_err(io)?;
        fs::write(dir.join("voltages.csv"), voltage_csv(&report)?).map_err(io)?;
        if report.slacks.is_some() {
            fs::write(dir.join("slacks.csv"), slack_csv(&report)?).map_err(io)?;
        }
    }
    Ok(report.status.exit_code())
}

fn print_summary(report: &SolveReport, case: &Case) {
    let status = match report.status {
        RunStatus::Feasible => "feasible",
        RunStatus::DiagnosedInfeasible => "infeasible",
        RunStatus::NotConverged => "not converged",
    };
    println!("case {}: {status}", report.case);
    println!(
        "  cost {:.6} (generation {:.6}, curtailment {:.6}, reactive support {:.6})",
        report.cost.total,
        report.cost.generation,
        report.cost.curtailment,
        report.cost.reactive_support
    );
    println!(
        "  max violation {:.3e} p.u., max mismatch {:.3e} MVA, {} iterations, {:.3} s",
        report.max_violation,
        report.max_mismatch_mva,
        report.trace.len(),
        report.runtime_s
    );
    let scale = case.power_unit.per_unit(report.base_mva);
    for g in &report.generation {
        println!(
            "  gen bus{}.{}: P {:.4} Q {:.4} {}",
            g.bus,
            g.phase,
            g.p * scale,
            g.q * scale,
            case.power_unit.label()
        );
    }
    if let Some(slacks) = &report.slacks {
        for s in slacks.iter().filter(|s| s.slack > 0.0).take(10) {
            println!("  slack {:.4e} {}", s.slack, s.name);
        }
    }
    for note in &report.notes {
        println!("  note: {note}");
    }
}

fn validate(case: &Path, report: &Path) -> Result<i32, Failure> {
    let (_, problem) = load(case)?;
    let report = read_report(report)?;
    let v = validate_report(&problem, &report)?;
    println!(
        "max violation {:.3e} p.u., mismatch {:.3e} MVA, residual disagreement {:.3e}, cost {:.6} (report differs by {:.3e})",
        v.max_violation, v.max_mismatch_mva, v.residual_disagreement, v.cost, v.cost_difference
    );
    println!("{}", if v.ok { "valid" } else { "INVALID" });
    Ok(if v.ok { 0 } else { 1 })
}

fn convert(input: &Path, output: &Path) -> Result<i32, Failure> {
    let case = parse_case(input)?;
    let text = match output.extension().and_then(|e| e.to_str()) {
        Some("m") => write_matpower(&case)?,
        Some("json") => write_json(&case)?,
        _ => return Err(Failure::Input(format!("{}: output must end in .m or .json", output.display()))),
    };
    fs::write(output, text).map_err(|e| Failure::Input(format!("{}: {e}", output.display())))?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("FPPOPF_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Solve(args) => run(args, Mode::Solve),
        Command::Diagnose(args) => run(args, Mode::Diagnose),
        Command::Validate { case, report } => validate(&case, &report),
        Command::Convert { input, output } => convert(&input, &output),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(4)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
