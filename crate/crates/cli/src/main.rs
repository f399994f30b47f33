mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forestgen::forest::{LabelMode, Method};
use forestgen::gbdt::TreeMode;
use forestgen::resource::alloc::CountingAlloc;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser, Debug)]
#[command(name = "forestgen", version, about = "Tree-ensemble flow and diffusion models for tabular data")]
pub struct Cli {
    /// File of `key = value` lines supplying defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train a model store from a CSV file.
    Train(TrainArgs),
    /// Generate samples from a model store.
    Generate(GenerateArgs),
    /// Compare generated data against train and test sets.
    Evaluate(EvaluateArgs),
    /// Time and memory sweep over synthetic datasets.
    Bench(BenchArgs),
    /// Closed-form memory estimates.
    EstimateMem(EstimateArgs),
    /// Train on one synthetic dataset and report time and peak memory.
    #[command(hide = true)]
    TrainSynth(TrainSynthArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct HpArgs {
    #[arg(long)]
    pub method: Option<Method>,
    /// so or mo.
    #[arg(long)]
    pub trees: Option<TreeMode>,
    #[arg(long)]
    pub n_t: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n_tree: Option<usize>,
    /// Early-stopping patience; 0 disables it.
    #[arg(long)]
    pub n_es: Option<usize>,
    #[arg(long)]
    pub eta: Option<f32>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub max_bins: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub beta_min: Option<f64>,
    #[arg(long)]
    pub beta_max: Option<f64>,
    /// global or per_class.
    #[arg(long)]
    pub scaler: Option<String>,
    /// Default label mode stored with the model: multinomial or empirical.
    #[arg(long)]
    pub labels: Option<LabelMode>,
    /// Falls back to FORESTGEN_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every CPU.
    #[arg(long)]
    pub n_jobs: Option<usize>,
    /// Materialize all timesteps and keep all boosters in memory. In a bench
    /// sweep, also run this naive pipeline next to the optimized one.
    #[arg(long)]
    pub naive: bool,
    /// Keep the shared training buffers in memory-mapped files.
    #[arg(long)]
    pub file_backed: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Label column name (or index without a header); omit for unconditional data.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub no_header: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub hp: HpArgs,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// multinomial or empirical; defaults to the mode stored with the model.
    #[arg(long)]
    pub labels: Option<LabelMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Must equal the trained n_t.
    #[arg(long)]
    pub n_t_gen: Option<usize>,
    /// Take n_t - 1 Euler steps instead of n_t.
    #[arg(long)]
    pub strict_time: bool,
    /// Generate in blocks of at most this many rows.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_jobs: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generated: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Label column to drop before comparing features.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub no_header: bool,
    /// Histogram bins for the chi-square separation.
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// n, p, n_y or all.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Largest n in the n sweep.
    #[arg(long)]
    pub max_n: Option<usize>,
    /// Comma-separated n values replacing the default n sweep.
    #[arg(long)]
    pub n_values: Option<String>,
    /// Naive points whose n*K*p*n_t*4 input tensor exceeds this are skipped,
    /// e.g. 4GiB.
    #[arg(long)]
    pub mem_limit: Option<String>,
    /// Directory for temporary stores.
    #[arg(long)]
    pub scratch: Option<PathBuf>,
    #[command(flatten)]
    pub hp: HpArgs,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub p: Option<u64>,
    #[arg(long)]
    pub n_y: Option<u64>,
    #[arg(long)]
    pub n_t: Option<u64>,
    #[arg(long)]
    pub k: Option<u64>,
    #[arg(long)]
    pub n_jobs: Option<u64>,
    #[arg(long)]
    pub n_tree: Option<u64>,
    #[arg(long)]
    pub depth: Option<u32>,
    /// Bytes per element, 4 or 8.
    #[arg(long)]
    pub w: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainSynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub p: usize,
    #[arg(long, default_value_t = 10)]
    pub n_y: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Delete the store after measuring.
    #[arg(long)]
    pub remove_store: bool,
    #[command(flatten)]
    pub hp: HpArgs,
}

/// Failure kinds mapped to exit codes 2 and 1.
pub enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

fn main() -> ExitCode {
    CountingAlloc::activate();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
