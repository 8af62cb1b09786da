use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use msprr::metrics::{evaluate, write_traces, MetricsReport};
use msprr::sampler::{run_to_dir, RunPlan, Variant};
use msprr::simulation::{generate, GroundTruth, ScenarioSpec};
use msprr::store::DrawStore;
use msprr::{Dataset, Error, PriorConfig};

const DATA_FILE: &str = "data.csv";
const TRUTH_FILE: &str = "truth.json";
const REPORT_JSON: &str = "report.json";
const REPORT_CSV: &str = "report.csv";
const TRACES_FILE: &str = "traces.csv";

#[derive(Parser)]
#[command(name = "msprr", version, about = "Markov-switching partial reduced-rank regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic data sets with their ground truth.
    Simulate(SimulateArgs),
    /// Run the sampler on a data set, or on freshly simulated replications.
    Fit(FitArgs),
    /// Score stored draws against a ground truth.
    Report(ReportArgs),
    /// Export s, γ, r, σ²_f and ζ paths as a long-format CSV.
    Traces(TracesArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=6))]
    scenario: u8,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    replications: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// CSV with `y*` and `x*` columns. Mutually exclusive with --scenario.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    data: Option<PathBuf>,
    /// Simulate and fit this scenario instead of reading --data.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=6))]
    scenario: Option<u8>,
    #[arg(long, default_value_t = 1)]
    replications: usize,
    /// TOML prior configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    iterations: u64,
    #[arg(long = "burn-in", default_value_t = 5_000)]
    burn_in: u64,
    #[arg(long, default_value_t = 1)]
    thin: u64,
    /// ms-prr, prr-gp or constant-volatility. Scenario runs default to the
    /// scenario's own choice.
    #[arg(long)]
    variant: Option<Variant>,
    /// Sweeps between checkpoints (0 writes one only at the end).
    #[arg(long = "checkpoint-every", default_value_t = 500)]
    checkpoint_every: u64,
    /// Continue from the checkpoint in --out if there is one.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory written by `fit`; replication subdirectories are
    /// reported one by one.
    #[arg(long)]
    out: PathBuf,
    /// Data set the draws were fitted to (default: data.csv in the run directory).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Ground truth JSON (default: truth.json in the run directory).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct TracesArgs {
    /// Run directory written by `fit`.
    #[arg(long)]
    out: PathBuf,
}

fn rep_dir(out: &Path, i: usize, n: usize) -> PathBuf {
    if n == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("rep-{:03}", i + 1))
    }
}

fn check_replications(n: usize) -> msprr::Result<()> {
    if n == 0 {
        return Err(Error::Validation(msprr::error::ValidationErrors::single(
            "replications",
            "must be at least 1",
        )));
    }
    Ok(())
}

fn simulate(args: &SimulateArgs) -> msprr::Result<()> {
    check_replications(args.replications)?;
    let spec = ScenarioSpec::preset(args.scenario)?;
    for i in 0..args.replications {
        let dir = rep_dir(&args.out, i, args.replications);
        std::fs::create_dir_all(&dir)?;
        let (data, truth) = generate(&spec, args.seed + i as u64)?;
        data.write_csv(&dir.join(DATA_FILE))?;
        truth.write_json(&dir.join(TRUTH_FILE))?;
        log::info!("wrote {}", dir.display());
    }
    Ok(())
}

fn plan_for(args: &FitArgs, seed: u64, variant: Variant) -> RunPlan {
    RunPlan {
        iterations: args.iterations,
        burn_in: args.burn_in,
        thin: args.thin,
        seed,
        checkpoint_every: args.checkpoint_every,
        variant,
    }
}

fn fit(args: &FitArgs) -> msprr::Result<()> {
    check_replications(args.replications)?;
    let file_config = args.config.as_deref().map(PriorConfig::from_path).transpose()?;
    let Some(id) = args.scenario else {
        let path = args.data.as_deref().expect("clap requires --data without --scenario");
        let data = Dataset::read_csv(path)?;
        let config = file_config.unwrap_or_default();
        let plan = plan_for(args, args.seed, args.variant.unwrap_or(Variant::MsPrr));
        let store = run_to_dir(&data, &config, &plan, &args.out, args.resume, None)?;
        log::info!("{} draws in {}", store.len(), args.out.display());
        return Ok(());
    };

    let spec = ScenarioSpec::preset(id)?;
    let variant = args.variant.unwrap_or(if spec.sv_in_estimation {
        Variant::MsPrr
    } else {
        Variant::ConstantVolatility
    });
    let config = file_config.unwrap_or_else(|| PriorConfig::with_states(spec.k_fit()));
    let n = args.replications;
    let reports = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = args.seed + i as u64;
            let dir = rep_dir(&args.out, i, n);
            std::fs::create_dir_all(&dir)?;
            let (data, truth) = generate(&spec, seed)?;
            data.write_csv(&dir.join(DATA_FILE))?;
            truth.write_json(&dir.join(TRUTH_FILE))?;
            let store = run_to_dir(&data, &config, &plan_for(args, seed, variant), &dir, args.resume, None)?;
            let report = evaluate(&store, &data, &truth)?;
            report.write_json(&dir.join(REPORT_JSON))?;
            log::info!("replication {} done: mse {:.3}, mspe {:.3}", i + 1, report.mse, report.mspe);
            Ok(report)
        })
        .collect::<msprr::Result<Vec<_>>>()?;
    MetricsReport::write_csv(&reports, &args.out.join(REPORT_CSV))?;
    println!("{}", serde_json::to_string_pretty(&reports).map_err(Error::from)?);
    Ok(())
}

fn report_one(dir: &Path, data: Option<&Path>, truth: Option<&Path>) -> msprr::Result<MetricsReport> {
    let store = DrawStore::read_dir(dir)?;
    let data = Dataset::read_csv(data.unwrap_or(&dir.join(DATA_FILE)))?;
    let truth = GroundTruth::read_json(truth.unwrap_or(&dir.join(TRUTH_FILE)))?;
    let report = evaluate(&store, &data, &truth)?;
    report.write_json(&dir.join(REPORT_JSON))?;
    Ok(report)
}

fn report(args: &ReportArgs) -> msprr::Result<()> {
    let mut reps: Vec<PathBuf> = std::fs::read_dir(&args.out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("rep-")))
        .collect();
    reps.sort();
    let reports = if reps.is_empty() {
        vec![report_one(&args.out, args.data.as_deref(), args.truth.as_deref())?]
    } else {
        reps.iter()
            .map(|d| report_one(d, None, None))
            .collect::<msprr::Result<Vec<_>>>()?
    };
    MetricsReport::write_csv(&reports, &args.out.join(REPORT_CSV))?;
    println!("{}", serde_json::to_string_pretty(&reports).map_err(Error::from)?);
    Ok(())
}

fn traces(args: &TracesArgs) -> msprr::Result<()> {
    let store = DrawStore::read_dir(&args.out)?;
    write_traces(&store, &args.out.join(TRACES_FILE))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Report(a) => report(a),
        Command::Traces(a) => traces(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
