use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use contingen_core::contingency::rank_all_jobs;
use contingen_core::pipeline::{self, FailureKind, PipelineError, RunConfig, Stage};
use contingen_core::{
    apply_outage, flat_start, is_connected, run_cpf, solve_newton, transfer_schedule, CpfError, CpfOptions,
    NetworkCase,
};
use serde_json::json;

/// Environment variable that overrides `out_dir` from the config file.
const OUT_DIR_ENV: &str = "CONTINGEN_OUT_DIR";

#[derive(Parser)]
#[command(name = "contingen", version, about = "Voltage-collapse contingency screening")]
struct Cli {
    /// Worker threads for data generation, ranking and evaluation.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print bus, generator and branch counts, slack bus and connectivity.
    CaseInfo {
        /// Built-in case name or MATPOWER file.
        case: String,
        #[arg(long)]
        json: bool,
    },
    /// Solve the AC power flow from a flat start.
    Pf {
        case: String,
        /// Remove this branch (0-based row index) first.
        #[arg(long)]
        outage: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Trace the continuation curve up to the nose.
    Cpf {
        case: String,
        #[arg(long, default_value_t = 2.5)]
        target_scale: f64,
        #[arg(long)]
        outage: Option<usize>,
        /// Write the traced points as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Rank every non-islanding single-branch outage by load margin.
    Rank {
        case: String,
        #[arg(long, default_value_t = 2.5)]
        target_scale: f64,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the training dataset.
    GenData(StageArgs),
    /// Train the denoiser on the generated dataset.
    Train(StageArgs),
    /// Sample one candidate contingency per evaluation base state.
    Sample(StageArgs),
    /// Score generated samples against the oracle and write reports.
    Eval(StageArgs),
    /// Run every stage, skipping those whose outputs are current.
    Pipeline(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Error tagged with the process exit code it maps to.
#[derive(Debug)]
struct Exit(u8);

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.0 {
            2 => "input error",
            3 => "numerical failure",
            _ => "I/O error",
        };
        f.write_str(kind)
    }
}

const INPUT: Exit = Exit(2);
const NUMERICAL: Exit = Exit(3);
const IO: Exit = Exit(4);

fn code_of(kind: FailureKind) -> Exit {
    match kind {
        FailureKind::Input => INPUT,
        FailureKind::Numerical => NUMERICAL,
        FailureKind::Io => IO,
    }
}

fn tagged(e: PipelineError) -> anyhow::Error {
    let code = code_of(e.kind);
    anyhow::Error::new(e).context(code)
}

fn load_case(spec: &str) -> Result<NetworkCase> {
    pipeline::load_case(spec).map_err(tagged)
}

fn with_outage(case: NetworkCase, outage: Option<usize>) -> Result<NetworkCase> {
    let Some(k) = outage else { return Ok(case) };
    let cut = apply_outage(&case, k).context(INPUT)?;
    if !is_connected(&cut) {
        return Err(anyhow::anyhow!("removing branch {k} islands the network")).context(INPUT);
    }
    Ok(cut)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .context(IO)
}

fn cpf_code(e: &CpfError) -> Exit {
    match e {
        CpfError::BadTargetScale(_) | CpfError::ScheduleLength { .. } | CpfError::BadOptions(_) => INPUT,
        _ => NUMERICAL,
    }
}

fn case_info(spec: &str, as_json: bool) -> Result<()> {
    let case = load_case(spec)?;
    let slack = &case.buses[case.slack_index()];
    let connected = is_connected(&case);
    let in_service = case.in_service_count();
    if as_json {
        let v = json!({
            "name": case.name,
            "buses": case.n_buses(),
            "generators": case.gens.len(),
            "branches": case.branches.len(),
            "in_service_branches": in_service,
            "slack_bus": slack.id,
            "connected": connected,
            "base_mva": case.base_mva,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!("{}", case.name);
        println!("{} buses, {} branches", case.n_buses(), case.branches.len());
        println!("{} generators, {} branches in service", case.gens.len(), in_service);
        println!("slack bus {}", slack.id);
        println!("{}", if connected { "connected" } else { "not connected" });
    }
    Ok(())
}

fn pf(spec: &str, outage: Option<usize>, as_json: bool) -> Result<()> {
    let case = with_outage(load_case(spec)?, outage)?;
    let sol = solve_newton(&case, &flat_start(&case), 1e-8, 30).context(NUMERICAL)?;
    let (bus, vm) = sol.state.vm_min();
    if as_json {
        let v = json!({
            "converged": sol.converged,
            "iterations": sol.iterations,
            "max_mismatch": sol.max_mismatch,
            "vm_min": vm,
            "vm_min_bus": case.buses[bus].id,
            "vm": sol.state.vm,
            "va": sol.state.va,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!(
            "converged {} in {} iterations, max mismatch {:.3e}",
            sol.converged, sol.iterations, sol.max_mismatch
        );
        println!("lowest voltage {vm:.4} pu at bus {}", case.buses[bus].id);
    }
    if !sol.converged {
        return Err(anyhow::anyhow!("power flow did not converge")).context(NUMERICAL);
    }
    Ok(())
}

fn cpf(spec: &str, scale: f64, outage: Option<usize>, trace_out: Option<&Path>, as_json: bool) -> Result<()> {
    let intact = load_case(spec)?;
    let sched = transfer_schedule(&intact, scale).map_err(|e| {
        let code = cpf_code(&e);
        anyhow::Error::new(e).context(code)
    })?;
    let case = with_outage(intact, outage)?;
    let trace = run_cpf(&case, &sched, &CpfOptions::default()).map_err(|e| {
        let code = cpf_code(&e);
        anyhow::Error::new(e).context(code)
    })?;
    if let Some(path) = trace_out {
        write_file(path, &trace.to_csv(&case))?;
    }
    if as_json {
        let v = json!({
            "max_lambda": trace.max_lambda,
            "termination": format!("{:?}", trace.terminated),
            "steps": trace.steps,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!(
            "max lambda {:.6} ({:?}, {} steps)",
            trace.max_lambda, trace.terminated, trace.steps
        );
    }
    Ok(())
}

fn rank(spec: &str, scale: f64, out: Option<&Path>, jobs: usize) -> Result<()> {
    let case = load_case(spec)?;
    let sched = transfer_schedule(&case, scale).map_err(|e| {
        let code = cpf_code(&e);
        anyhow::Error::new(e).context(code)
    })?;
    let table = rank_all_jobs(&case, &sched, &CpfOptions::default(), jobs).map_err(|e| {
        let code = match &e {
            contingen_core::contingency::OracleError::Cpf(c) => cpf_code(c),
            _ => NUMERICAL,
        };
        anyhow::Error::new(e).context(code)
    })?;
    let csv = table.to_csv();
    match out {
        Some(path) => write_file(path, &csv)?,
        None => print!("{csv}"),
    }
    if !table.unconverged.is_empty() {
        eprintln!("{} outages did not converge and are unranked", table.unconverged.len());
    }
    Ok(())
}

fn run_config(args: &StageArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .context(IO)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .context(INPUT)?
        }
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
        config.out_dir = PathBuf::from(dir);
    }
    Ok(config)
}

fn stage(args: &StageArgs, stage: Stage, jobs: usize) -> Result<()> {
    let config = run_config(args)?;
    let case = load_case(&config.case)?;
    let report = pipeline::run_stage(&config, &case, stage, jobs, &mut |line: &str| eprintln!("{line}"))
        .map_err(tagged)?;
    if let Some(r) = report {
        print_report(&r);
    }
    eprintln!("{}: wrote to {}", stage.name(), config.out_dir.display());
    Ok(())
}

fn print_report(r: &contingen_core::eval::EvalReport) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "score {:.3} (uniform baseline {:.3}), top-3 {:.3}, MAE P {} Q {}, {} excluded",
        r.score,
        r.uniform_baseline,
        r.top_k_fraction(3),
        fmt(r.mae_p),
        fmt(r.mae_q),
        r.exclusions
    );
}

fn run_all(args: &StageArgs, jobs: usize) -> Result<()> {
    let config = run_config(args)?;
    let outcome = pipeline::run_pipeline(&config, jobs, |line| eprintln!("{line}")).map_err(tagged)?;
    print_report(&outcome.report);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs as usize;
    match &cli.command {
        Command::CaseInfo { case, json } => case_info(case, *json),
        Command::Pf { case, outage, json } => pf(case, *outage, *json),
        Command::Cpf {
            case,
            target_scale,
            outage,
            trace,
            json,
        } => cpf(case, *target_scale, *outage, trace.as_deref(), *json),
        Command::Rank {
            case,
            target_scale,
            out,
        } => rank(case, *target_scale, out.as_deref(), jobs),
        Command::GenData(a) => stage(a, Stage::Data, jobs),
        Command::Train(a) => stage(a, Stage::Train, jobs),
        Command::Sample(a) => stage(a, Stage::Sample, jobs),
        Command::Eval(a) => stage(a, Stage::Eval, jobs),
        Command::Pipeline(a) => run_all(a, jobs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Exit>().map_or(1, |x| x.0);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
