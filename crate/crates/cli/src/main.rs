//! `fdsim`: run experiments, the cache-hit simulation and parameter sweeps.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration (and I/O
//! failures), 2 protocol desynchronization.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fdsim_core::aggregation::AggregationPolicy;
use fdsim_core::cache::ExpiryMode;
use fdsim_core::hitsim::{simulate_hit_ratio, HitSimConfig};
use fdsim_core::learner::LinearSoftmaxModel;
use fdsim_core::orchestrator::{ExperimentConfig, Method, RunSummary, Simulation};
use fdsim_core::rng::{derive_seed, Stream};
use serde::Serialize;

const EXIT_CONFIG: u8 = 1;
const EXIT_DESYNC: u8 = 2;

#[derive(Parser)]
#[command(
    name = "fdsim",
    version,
    about = "Federated distillation simulator with soft-label caching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, comm.csv and summary.toml.
    Run(RunArgs),
    /// Cache-hit simulation: one CSV of (round, hit_ratio) per duration.
    Cachesim(CacheSimArgs),
    /// Run one experiment per value of a single config axis.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
}

/// Where the config comes from, where outputs go, and overrides.
#[derive(Args, Clone)]
struct ManifestArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the run seed and every nested seed.
    #[arg(long)]
    seed: Option<u64>,
    /// SCARLET, DSFL or INDIVIDUAL.
    #[arg(long)]
    method: Option<Method>,
}

#[derive(Args)]
struct CacheSimArgs {
    #[arg(long, default_value_t = 10_000)]
    pool: usize,
    #[arg(long, default_value_t = 1000)]
    per_round: usize,
    /// Comma-separated cache durations, e.g. `0,50,200`.
    #[arg(long, value_delimiter = ',', required = true)]
    durations: Vec<u32>,
    #[arg(long, default_value_t = 1000)]
    rounds: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ExpiryArg::Refresh)]
    expiry: ExpiryArg,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExpiryArg {
    Refresh,
    Evict,
}

impl From<ExpiryArg> for ExpiryMode {
    fn from(e: ExpiryArg) -> Self {
        match e {
            ExpiryArg::Refresh => ExpiryMode::Refresh,
            ExpiryArg::Evict => ExpiryMode::Evict,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    /// Sharpening exponent of the power aggregation.
    Beta,
    /// Cache duration in rounds.
    Duration,
    /// Dirichlet concentration of the client partition.
    Alpha,
    /// Fraction of clients per round.
    Participation,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Beta => "beta",
            Axis::Duration => "duration",
            Axis::Alpha => "alpha",
            Axis::Participation => "participation",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> anyhow::Result<()> {
        match self {
            Axis::Beta => cfg.aggregation = AggregationPolicy::EnhancedEra { beta: value },
            Axis::Duration => {
                if !(value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64) {
                    return Err(anyhow!("duration {value} is not a non-negative integer"));
                }
                cfg.cache_duration = value as u32;
            }
            Axis::Alpha => cfg.partition.dirichlet_alpha = value,
            Axis::Participation => cfg.participation_ratio = value,
        }
        Ok(())
    }
}

/// A failed command and the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure::config(error)
    }
}

type CmdResult<T> = Result<T, Failure>;

/// Resolved inputs of one experiment run.
struct RunManifest {
    config: ExperimentConfig,
    out_dir: PathBuf,
}

impl ManifestArgs {
    fn resolve(&self) -> anyhow::Result<RunManifest> {
        let mut config = match &self.config {
            Some(path) => {
                let text =
                    fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
                ExperimentConfig::from_toml_str(&text).with_context(|| format!("invalid config {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config = config.with_seed(seed);
        }
        if let Some(method) = self.method {
            config.method = method;
        }
        config.validate()?;
        Ok(RunManifest {
            config,
            out_dir: self.out.clone(),
        })
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Run to completion and write all artifacts into `out_dir`. A desync writes
/// `desync_dump.txt` there before aborting.
fn run_experiment(config: ExperimentConfig, out_dir: &Path) -> CmdResult<RunSummary> {
    create_dir(out_dir)?;
    let rounds = config.rounds;
    let mut sim = Simulation::<LinearSoftmaxModel>::new(config).map_err(Failure::config)?;
    while sim.round() < rounds {
        if let Err(e) = sim.run_round() {
            if !e.is_desync() {
                return Err(Failure::config(e));
            }
            let dump = out_dir.join("desync_dump.txt");
            write_file(&dump, sim.diagnostic_dump(&e))?;
            return Err(Failure {
                code: EXIT_DESYNC,
                error: anyhow!("{e}; diagnostic dump written to {}", dump.display()),
            });
        }
    }

    let mut metrics = Vec::new();
    sim.write_metrics_csv(&mut metrics).map_err(Failure::config)?;
    write_file(&out_dir.join("metrics.csv"), metrics)?;
    let mut comm = Vec::new();
    sim.ledger().write_csv(&mut comm).map_err(Failure::config)?;
    write_file(&out_dir.join("comm.csv"), comm)?;
    let summary = sim.summary();
    write_file(
        &out_dir.join("summary.toml"),
        summary.to_toml_string().map_err(Failure::config)?,
    )?;
    Ok(summary)
}

fn print_summary(label: &str, s: &RunSummary) {
    println!(
        "{label}{} rounds={} server_acc={:.4} client_acc={:.4} uplink={} downlink={} hit_ratio={:.3}",
        s.method,
        s.rounds_completed,
        s.final_server_test_accuracy,
        s.final_mean_client_test_accuracy,
        s.cumulative_uplink_bytes,
        s.cumulative_downlink_bytes,
        s.mean_cache_hit_ratio
    );
}

fn cmd_run(args: &RunArgs) -> CmdResult<()> {
    let manifest = args.manifest.resolve()?;
    let summary = run_experiment(manifest.config, &manifest.out_dir)?;
    print_summary("", &summary);
    println!("wrote {}", manifest.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct HitRow {
    round: u32,
    hit_ratio: f64,
}

fn cmd_cachesim(args: &CacheSimArgs) -> CmdResult<()> {
    let configs: Vec<HitSimConfig> = args
        .durations
        .iter()
        .map(|&d| {
            HitSimConfig::new(args.pool, args.per_round, d, args.rounds, args.seed).with_expiry(args.expiry.into())
        })
        .collect();
    for cfg in &configs {
        cfg.validate().map_err(Failure::config)?;
    }
    create_dir(&args.out)?;
    for cfg in &configs {
        let trace = simulate_hit_ratio(cfg).map_err(Failure::config)?;
        let path = args.out.join(format!("hit_ratio_D{}.csv", cfg.duration));
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
        for (i, &hit_ratio) in trace.iter().enumerate() {
            w.serialize(HitRow {
                round: i as u32 + 1,
                hit_ratio,
            })
            .context("csv")?;
        }
        if trace.is_empty() {
            w.write_record(["round", "hit_ratio"]).context("csv")?;
        }
        w.flush().context("csv")?;
        let mean = trace.iter().sum::<f64>() / trace.len().max(1) as f64;
        println!("D={} mean_hit_ratio={mean:.4} -> {}", cfg.duration, path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    value: f64,
    final_server_test_accuracy: f64,
    final_mean_client_test_accuracy: f64,
    cumulative_uplink_bytes: u64,
    cumulative_downlink_bytes: u64,
    seed: u64,
}

fn cmd_sweep(args: &SweepArgs) -> CmdResult<()> {
    if args.values.is_empty() {
        return Err(Failure::config(anyhow!("--values is empty")));
    }
    let base = args.manifest.resolve()?;
    let axis = args.axis.name();

    // The task and the partition stay fixed so every value sees the same
    // federation; run-level and training seeds are derived per value.
    let mut configs = Vec::with_capacity(args.values.len());
    for (i, &value) in args.values.iter().enumerate() {
        let mut cfg = base.config.clone();
        args.axis.apply(&mut cfg, value)?;
        cfg.seed = derive_seed(base.config.seed, Stream::Sweep, i as u64, 0);
        cfg.train.seed = derive_seed(base.config.train.seed, Stream::Sweep, i as u64, 1);
        cfg.validate().with_context(|| format!("{axis}={value}"))?;
        configs.push((value, cfg));
    }

    create_dir(&base.out_dir)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (i, (value, cfg)) in configs.into_iter().enumerate() {
        let seed = cfg.seed;
        let dir = base.out_dir.join(format!("{i:02}_{axis}_{value}"));
        let s = run_experiment(cfg, &dir)?;
        print_summary(&format!("{axis}={value} "), &s);
        rows.push(SweepRow {
            value,
            final_server_test_accuracy: s.final_server_test_accuracy,
            final_mean_client_test_accuracy: s.final_mean_client_test_accuracy,
            cumulative_uplink_bytes: s.cumulative_uplink_bytes,
            cumulative_downlink_bytes: s.cumulative_downlink_bytes,
            seed,
        });
    }

    let path = base.out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    for row in &rows {
        w.serialize(row).context("csv")?;
    }
    w.flush().context("csv")?;
    println!("wrote {}", path.display());
    Ok(())
}

/// `FDSIM_THREADS` caps the worker pool; unset or 0 lets rayon decide.
fn init_threads() -> anyhow::Result<()> {
    let threads = match std::env::var("FDSIM_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .with_context(|| format!("FDSIM_THREADS={v:?} is not a number"))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("thread pool")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = init_threads()
        .map_err(Failure::config)
        .and_then(|()| match &cli.command {
            Command::Run(args) => cmd_run(args),
            Command::Cachesim(args) => cmd_cachesim(args),
            Command::Sweep(args) => cmd_sweep(args),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
