//! `fedsynth`: stage-by-stage or end-to-end experiment driver.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 runtime/numeric
//! error, 5 privacy-budget abort. All JSON output is canonical: UTF-8,
//! sorted keys, newline-terminated.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fedsynth_core::config::{load_config, to_canonical_json, ExperimentConfig};
use fedsynth_core::data::{load_dataset, save_dataset, synth_blobs, FileFormat};
use fedsynth_core::error::{Error, Result};
use fedsynth_core::experiment::{self, report};
use fedsynth_core::numerics::rng::{Purpose, RngStream, StreamId};
use fedsynth_core::privacy::{calibrate_noise, compose_epsilon, default_orders, rdp_subsampled_gaussian};

#[derive(Parser)]
#[command(
    name = "fedsynth",
    version,
    about = "Privacy-preserving federated data sharing via generative models on embeddings"
)]
struct Cli {
    /// Worker threads for parallel client training (overrides FEDSYNTH_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage for every seed in the config.
    Run(StageArgs),
    /// Materialize the dataset (from a config, or directly via --blobs).
    GenData(GenDataArgs),
    /// Assign samples to clients and write per-client train/val/test splits.
    Partition(SeedStageArgs),
    /// Federated (DP-)training of the generative model or baseline classifier.
    TrainGen(SeedStageArgs),
    /// Sample synthetic embeddings from the aggregated decoder/generator.
    Synthesize(SeedStageArgs),
    /// Train the global and per-client downstream classifiers.
    TrainDownstream(SeedStageArgs),
    /// Per-client test metrics; refreshes run-level aggregates and manifest.
    Evaluate(SeedStageArgs),
    /// Privacy accountant queries (JSON output).
    Accountant {
        #[command(subcommand)]
        query: AccountantCmd,
    },
    /// Merge completed runs into comparison tables and plot-data CSVs.
    Report(ReportArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory (overrides FEDSYNTH_OUTPUT_DIR and the config value).
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SeedStageArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Process only this seed (default: every seed in the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["config", "blobs"]))]
struct GenDataArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generate Gaussian blobs directly, e.g. --blobs K=3,d=16,n=600,s=8
    /// (K classes, d dimensions, n samples per class, s separation).
    #[arg(long, value_name = "SPEC")]
    blobs: Option<String>,
    /// Output file for --blobs mode (default: dataset.femb).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generator seed for --blobs mode.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory for --config mode.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AccountantCmd {
    /// Per-order RDP of the subsampled Gaussian mechanism after `steps` steps.
    Rdp {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        steps: u64,
        /// Comma-separated RDP orders (default: the standard grid).
        #[arg(long)]
        orders: Option<String>,
    },
    /// (epsilon, delta)-DP guarantee after `steps` steps.
    Epsilon {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        orders: Option<String>,
    },
    /// Smallest noise multiplier meeting the epsilon target.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or directories containing runs.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Where to write report.{json,csv} and the plot-data CSVs.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_workers(cli.workers) {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_workers(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("FEDSYNTH_WORKERS") {
            Ok(v) => Some(v.parse::<usize>().map_err(|_| {
                Error::Config(format!("FEDSYNTH_WORKERS must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {n} workers: {e}")))?;
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(args) => {
            let (cfg, run_dir) = load_stage(&args)?;
            experiment::run(&cfg, &run_dir)?;
            print!("{}", std::fs::read_to_string(experiment::run_metrics_path(&run_dir))?);
            Ok(())
        }
        Command::GenData(args) => gen_data(args),
        Command::Partition(args) => for_each_seed(args, experiment::partition_stage),
        Command::TrainGen(args) => for_each_seed(args, experiment::train_gen),
        Command::Synthesize(args) => for_each_seed(args, experiment::synthesize),
        Command::TrainDownstream(args) => for_each_seed(args, experiment::train_downstream),
        Command::Evaluate(args) => evaluate(args),
        Command::Accountant { query } => accountant(query),
        Command::Report(args) => run_report(args),
    }
}

fn load_stage(args: &StageArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = load_config(&args.config)?;
    let run_dir = resolve_run_dir(&cfg, args.output_dir.as_deref());
    Ok((cfg, run_dir))
}

fn resolve_run_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Some(dir) = std::env::var_os("FEDSYNTH_OUTPUT_DIR") {
        return PathBuf::from(dir);
    }
    PathBuf::from(&cfg.output_dir)
}

fn seeds_to_process(cfg: &ExperimentConfig, seed: Option<u64>) -> Result<Vec<u64>> {
    match seed {
        None => Ok(cfg.seeds.clone()),
        Some(s) if cfg.seeds.contains(&s) => Ok(vec![s]),
        Some(s) => Err(Error::Config(format!(
            "seed {s} is not listed in the config (seeds = {:?})",
            cfg.seeds
        ))),
    }
}

fn for_each_seed(
    args: SeedStageArgs,
    stage: impl Fn(&ExperimentConfig, &Path, u64) -> Result<()>,
) -> Result<()> {
    let (cfg, run_dir) = load_stage(&args.stage)?;
    for seed in seeds_to_process(&cfg, args.seed)? {
        stage(&cfg, &run_dir, seed)?;
    }
    Ok(())
}

fn evaluate(args: SeedStageArgs) -> Result<()> {
    let (cfg, run_dir) = load_stage(&args.stage)?;
    for seed in seeds_to_process(&cfg, args.seed)? {
        experiment::evaluate_stage(&cfg, &run_dir, seed)?;
        let text = std::fs::read_to_string(experiment::seed_metrics_path(&run_dir, seed))?;
        let metrics: experiment::SeedMetrics = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("cannot parse seed metrics: {e}")))?;
        let n = metrics.clients.len().max(1) as f64;
        let acc = metrics.clients.iter().map(|c| c.acc).sum::<f64>() / n;
        let bacc = metrics.clients.iter().map(|c| c.bacc).sum::<f64>() / n;
        let value = json!({
            "acc": acc,
            "bacc": bacc,
            "clients": serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| Error::Data(format!("cannot parse seed metrics: {e}")))?["clients"],
            "method": metrics.method,
            "seed": seed,
        });
        print!("{}", to_canonical_json(&value));
    }
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let (dataset, path) = if let Some(spec) = &args.blobs {
        let spec = parse_blob_spec(spec)?;
        let mut rng = RngStream::new(args.seed, StreamId::new(0, 0, Purpose::Blobs));
        let dataset = synth_blobs(spec.k, spec.d, spec.n, spec.s, &mut rng)?;
        let path = args.out.clone().unwrap_or_else(|| PathBuf::from("dataset.femb"));
        save_dataset(&dataset, &path, FileFormat::Femb)?;
        (dataset, path)
    } else {
        let config = args.config.as_ref().expect("clap group guarantees one source");
        let cfg = load_config(config)?;
        let run_dir = resolve_run_dir(&cfg, args.output_dir.as_deref());
        experiment::gen_data(&cfg, &run_dir)?;
        let path = experiment::dataset_path(&run_dir);
        (load_dataset(&path, FileFormat::Femb)?, path)
    };
    let value = json!({
        "d": dataset.d(),
        "k": dataset.k(),
        "n": dataset.n(),
        "path": path.to_string_lossy(),
    });
    print!("{}", to_canonical_json(&value));
    Ok(())
}

struct BlobSpec {
    k: usize,
    d: usize,
    n: usize,
    s: f64,
}

/// Parse `K=3,d=16,n=600,s=8` (any order, all four keys required).
fn parse_blob_spec(spec: &str) -> Result<BlobSpec> {
    let (mut k, mut d, mut n, mut s) = (None, None, None, None);
    for item in spec.split(',') {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--blobs entry {item:?} is not key=value")))?;
        let bad = |what: &str| {
            Error::Config(format!("--blobs {key}={value}: expected {what}"))
        };
        match key.trim() {
            "K" => k = Some(value.trim().parse::<usize>().map_err(|_| bad("an integer"))?),
            "d" => d = Some(value.trim().parse::<usize>().map_err(|_| bad("an integer"))?),
            "n" => n = Some(value.trim().parse::<usize>().map_err(|_| bad("an integer"))?),
            "s" => s = Some(value.trim().parse::<f64>().map_err(|_| bad("a number"))?),
            other => {
                return Err(Error::Config(format!(
                    "--blobs key {other:?} is not one of K, d, n, s"
                )))
            }
        }
    }
    match (k, d, n, s) {
        (Some(k), Some(d), Some(n), Some(s)) => Ok(BlobSpec { k, d, n, s }),
        _ => Err(Error::Config(
            "--blobs requires all of K, d, n, s (e.g. K=3,d=16,n=600,s=8)".into(),
        )),
    }
}

fn parse_orders(orders: Option<&str>) -> Result<Vec<u32>> {
    match orders {
        None => Ok(default_orders()),
        Some(text) => text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::Config(format!("order {t:?} is not an integer")))
            })
            .collect(),
    }
}

fn accountant(query: AccountantCmd) -> Result<()> {
    let value = match query {
        AccountantCmd::Rdp { q, sigma, steps, orders } => {
            let orders = parse_orders(orders.as_deref())?;
            let rdp = orders
                .iter()
                .map(|&a| Ok(steps as f64 * rdp_subsampled_gaussian(q, sigma, a)?))
                .collect::<Result<Vec<f64>>>()?;
            json!({ "orders": orders, "q": q, "rdp": rdp, "sigma": sigma, "steps": steps })
        }
        AccountantCmd::Epsilon { q, sigma, steps, delta, orders } => {
            let orders = parse_orders(orders.as_deref())?;
            let (epsilon, best_order) = compose_epsilon(q, sigma, steps, delta, &orders)?;
            json!({
                "best_order": best_order,
                "delta": delta,
                "epsilon": epsilon,
                "q": q,
                "sigma": sigma,
                "steps": steps,
            })
        }
        AccountantCmd::Calibrate { epsilon, delta, q, steps } => {
            let orders = default_orders();
            let sigma = calibrate_noise(epsilon, delta, q, steps, &orders)?;
            let (achieved, best_order) = compose_epsilon(q, sigma, steps, delta, &orders)?;
            json!({
                "best_order": best_order,
                "delta": delta,
                "epsilon_achieved": achieved,
                "epsilon_target": epsilon,
                "q": q,
                "sigma": sigma,
                "steps": steps,
            })
        }
    };
    print!("{}", to_canonical_json(&value));
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let mut run_dirs = Vec::new();
    for root in &args.runs {
        run_dirs.extend(report::scan_runs(root)?);
    }
    run_dirs.dedup();
    if run_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no completed runs found under {:?}",
            args.runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()
        )));
    }
    let rep = report::report_tables(&run_dirs, &args.out)?;
    let value = json!({
        "methods": rep.rows.iter().map(|r| r.method.clone()).collect::<Vec<_>>(),
        "out": args.out.to_string_lossy(),
        "runs": run_dirs.len(),
    });
    print!("{}", to_canonical_json(&value));
    Ok(())
}
