//! `fedbias` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 step-size gate violation,
//! 4 numerical failure. Errors are printed to stderr as one JSON object.

mod analyses;
mod experiment;
mod output;
mod problem_source;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedbias::fedavg::{Algorithm, RunConfig};
use fedbias::{Error, Result};
use serde_json::{json, Value};

use analyses::{repro_fig1, run_analysis, AnalysisKind, AnalysisOptions, Ctx};
use experiment::{run_experiment, ExperimentConfig};
use output::{write_all, Outputs};
use problem_source::{GenSpec, ProblemArgs};

#[derive(Parser, Debug)]
#[command(name = "fedbias", version, about = "Constant step-size FedAvg simulation and verification lab")]
struct Cli {
    /// Output directory; a `manifest.json` is written next to the results.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed of every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Reject step sizes outside γ ≤ 1/(2L), γμH ≤ 1 in theory comparisons.
    #[arg(long, global = true)]
    strict: bool,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Share noise between the two runs of a Richardson-Romberg pair.
    #[arg(long, global = true)]
    coupled: bool,
    /// Run simulations even when γ exceeds the contraction gate 1/(2L).
    #[arg(long, global = true)]
    allow_large_step: bool,
    /// Experiment config; runs it when no subcommand is given.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Clone)]
struct CellArgs {
    /// Step size γ.
    #[arg(long)]
    gamma: f64,
    /// Local steps per round.
    #[arg(long = "h", default_value_t = 1)]
    h_local: usize,
    /// Communication rounds.
    #[arg(long, default_value_t = 1000)]
    rounds: usize,
    #[arg(long, default_value = "fedavg", value_parser = parse_algorithm)]
    algorithm: Algorithm,
    /// Keep every k-th round in trajectories and MSE traces.
    #[arg(long, default_value_t = 1)]
    record_every: usize,
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug, Clone)]
struct AnalysisArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    cell: CellArgs,
    #[command(flatten)]
    options: AnalysisOptions,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One run; writes the trajectory and its JSON sidecar.
    Run(AnalysisArgs),
    /// FedAvg-D fixed point, bias identity and first-order prediction.
    FixedPoint(AnalysisArgs),
    /// Monte Carlo stationary mean and covariance, plus coupled-chain decay.
    Stationary(AnalysisArgs),
    /// First-order bias and covariance predictions, optionally measured.
    BiasCheck(AnalysisArgs),
    /// FedAvg against its Richardson-Romberg extrapolation.
    RrCompare(AnalysisArgs),
    /// FedAvg against SCAFFOLD.
    ScaffoldCompare(AnalysisArgs),
    /// MSE curves of one algorithm over replicas.
    MseTrace(AnalysisArgs),
    /// Log-log slope of a bias quantity over step sizes.
    Slope(AnalysisArgs),
    /// Writes a generated problem as JSON.
    GenProblem(GenSpec),
    /// The benchmark matrix of MSE traces (two datasets, two H, three algorithms).
    ReproFig1 {
        #[arg(long, default_value_t = 10)]
        replicas: usize,
        #[arg(long, default_value_t = fedbias::datasets::DEFAULT_RECORDS_PER_CLIENT)]
        records: usize,
        #[arg(long = "problem-seed", default_value_t = 0)]
        problem_seed: u64,
    },
    /// Runs an experiment config (same as the global `--config`).
    Experiment,
}

fn analysis_kind(cmd: &Command) -> Option<(AnalysisKind, &AnalysisArgs)> {
    Some(match cmd {
        Command::Run(a) => (AnalysisKind::Run, a),
        Command::FixedPoint(a) => (AnalysisKind::FixedPoint, a),
        Command::Stationary(a) => (AnalysisKind::Stationary, a),
        Command::BiasCheck(a) => (AnalysisKind::BiasCheck, a),
        Command::RrCompare(a) => (AnalysisKind::RrCompare, a),
        Command::ScaffoldCompare(a) => (AnalysisKind::ScaffoldCompare, a),
        Command::MseTrace(a) => (AnalysisKind::MseTrace, a),
        Command::Slope(a) => (AnalysisKind::Slope, a),
        _ => return None,
    })
}

fn command_name(kind: AnalysisKind) -> String {
    serde_json::to_value(kind).unwrap().as_str().unwrap().to_string()
}

/// Writes `outputs` when `--out` is set and returns the stdout summary.
fn finish(cli: &Cli, command: &str, config: Value, outputs: Outputs) -> Result<Value> {
    if let Some(dir) = &cli.out {
        write_all(dir, command, &config, &outputs)?;
    }
    let mut summary = outputs.summary_value();
    if !outputs.warnings.is_empty() {
        summary["warnings"] = json!(outputs.warnings);
    }
    Ok(summary)
}

fn execute(cli: &Cli) -> Result<Value> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("cannot configure {n} threads: {e}")))?;
    }
    let ctx = Ctx {
        strict: cli.strict,
        coupled: cli.coupled,
        allow_large_step: cli.allow_large_step,
    };
    let flags = json!({
        "strict": cli.strict,
        "coupled": cli.coupled,
        "allow_large_step": cli.allow_large_step,
    });
    match &cli.command {
        Some(cmd @ Command::GenProblem(spec)) => {
            let p = spec.generate()?;
            let text = p.to_json()?;
            if let Some(dir) = &cli.out {
                let mut out = Outputs::default();
                out.digest(p.digest());
                out.files.push(output::Artifact {
                    path: "problem.json".into(),
                    contents: format!("{text}\n"),
                    schema: None,
                });
                let config = json!({ "generator": spec });
                write_all(dir, "gen-problem", &config, &out)?;
            }
            let _ = cmd;
            Ok(serde_json::from_str(&text)?)
        }
        Some(Command::ReproFig1 {
            replicas,
            records,
            problem_seed,
        }) => {
            if cli.out.is_none() {
                return Err(Error::invalid("repro-fig1 needs --out"));
            }
            let out = repro_fig1(*replicas, *records, *problem_seed, cli.seed, &ctx)?;
            let config = json!({
                "replicas": replicas,
                "records": records,
                "problem_seed": problem_seed,
                "seed": cli.seed,
                "gamma": analyses::FIG1_GAMMA,
                "gradient_budget": analyses::FIG1_BUDGET,
                "local_steps": analyses::FIG1_LOCAL_STEPS,
                "flags": flags,
            });
            finish(cli, "repro-fig1", config, out)
        }
        None | Some(Command::Experiment) => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::invalid("no subcommand given and no --config"))?;
            let cfg = ExperimentConfig::load(path)?;
            let dir = cli
                .out
                .clone()
                .or_else(|| cfg.out.clone())
                .ok_or_else(|| Error::invalid("experiment needs --out or an `out` entry"))?;
            let out = run_experiment(&cfg, &ctx)?;
            let mut config = serde_json::to_value(&cfg)?;
            config["flags"] = flags;
            if let Some(obj) = config.as_object_mut() {
                obj.remove("out");
            }
            write_all(&dir, "experiment", &config, &out)?;
            let mut summary = out.summary_value();
            if !out.warnings.is_empty() {
                summary["warnings"] = json!(out.warnings);
            }
            Ok(summary)
        }
        Some(cmd) => {
            let (kind, args) = analysis_kind(cmd).expect("analysis subcommand");
            let spec = args.problem.spec()?;
            let p = spec.load()?;
            let mut cell = RunConfig::new(
                args.cell.algorithm,
                args.cell.gamma,
                args.cell.h_local,
                args.cell.rounds,
                cli.seed,
            )
            .with_record_every(args.cell.record_every);
            cell.allow_large_step = cli.allow_large_step;
            cell.coupled = cli.coupled;
            let out = run_analysis(kind, &p, &cell, &args.options, &ctx)?;
            let name = command_name(kind);
            let config = json!({
                "problem": spec,
                "cell": cell,
                "options": args.options,
                "flags": flags,
            });
            finish(cli, &name, config, out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = json!({ "error": "usage", "message": e.to_string().trim(), "exit_code": 2 });
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            // A closed pipe on stdout is not an error worth reporting.
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&summary).unwrap());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            let msg = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
            eprintln!("{msg}");
            ExitCode::from(code as u8)
        }
    }
}
