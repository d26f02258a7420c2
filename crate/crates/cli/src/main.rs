//! `proxbundle`: train, sweep, geometry and prox-bench experiments.
//!
//! Exit codes: 0 on success, 1 when a computation fails, 2 for bad
//! arguments, configs or input files.

mod commands;
mod config;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "proxbundle", version, about = "Unrolled proximal self-expression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write its report, log, checkpoint and exported features.
    Train(TrainArgs),
    /// Train one model per placement on the same data order and write a CSV.
    Sweep(SweepArgs),
    /// Class distances, separability and optional t-SNE for exported features.
    Geometry(GeometryArgs),
    /// Run the proximal unroll alone on a feature matrix.
    ProxBench(ProxBenchArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Seed overriding the document's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment document (JSON, or TOML with a `.toml` extension).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Placements such as `none;1;L`; overrides the document's `sweep.placements`.
    #[arg(long)]
    placements: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GeometryArgs {
    /// Features as a PXB1 matrix, one column per sample.
    #[arg(long)]
    features: PathBuf,
    /// Labels as a JSON array, one per column.
    #[arg(long)]
    labels: PathBuf,
    /// Features of the same samples after the unroll; the separability report compares against it.
    #[arg(long)]
    post: Option<PathBuf>,
    /// Also embed each feature set in 2-D with t-SNE.
    #[arg(long)]
    tsne: bool,
    #[arg(long, default_value_t = 15.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 500)]
    tsne_iterations: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum W0 {
    Zero,
    Identity,
}

#[derive(Args, Debug)]
struct ProxBenchArgs {
    /// Features as a PXB1 matrix, one column per sample.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 5)]
    k_max: usize,
    #[arg(long)]
    zero_diagonal: bool,
    #[arg(long, value_enum, default_value_t = W0::Zero)]
    w0: W0,
    /// Take the schedule and starting point from a trained checkpoint instead of the flags above.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Block whose schedule to use; defaults to the checkpoint's deepest placement.
    #[arg(long, requires = "checkpoint")]
    block: Option<usize>,
    #[command(flatten)]
    common: Common,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    pub fn usage(e: impl Display) -> Self {
        Failure { code: 2, msg: e.to_string() }
    }

    pub fn runtime(e: impl Display) -> Self {
        Failure { code: 1, msg: e.to_string() }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("PROXBUNDLE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::usage(format!("PROXBUNDLE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(Failure::runtime)
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => commands::train(&a.config, a.common.seed, a.common.out),
        Command::Sweep(a) => commands::sweep(&a.config, a.placements.as_deref(), a.common.seed, a.common.out),
        Command::Geometry(a) => commands::geometry(&commands::GeometryOptions {
            features: a.features,
            labels: a.labels,
            post: a.post,
            tsne: a.tsne,
            perplexity: a.perplexity,
            tsne_iterations: a.tsne_iterations,
            seed: a.common.seed.unwrap_or(0),
            out: a.common.out.unwrap_or_else(|| PathBuf::from("out")),
        }),
        Command::ProxBench(a) => commands::prox_bench(&commands::ProxBenchOptions {
            features: a.features,
            lambda: a.lambda,
            k_max: a.k_max,
            zero_diagonal: a.zero_diagonal,
            identity_start: matches!(a.w0, W0::Identity),
            checkpoint: a.checkpoint,
            block: a.block,
            out: a.common.out.unwrap_or_else(|| PathBuf::from("out")),
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
