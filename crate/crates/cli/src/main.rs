mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Multipole attention neural operator: data, training and verification.
#[derive(Debug, Parser)]
#[command(name = "mano", version)]
pub struct Cli {
    /// Global seed; data, init, shuffle and dropout streams derive from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` file; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $MANO_OUTDIR, else the working directory).
    #[arg(long, global = true)]
    pub outdir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a Darcy dataset file.
    GenData(GenDataArgs),
    /// Train an operator model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Finite-difference check of all model gradients.
    GradCheck(GradCheckArgs),
    /// Manufactured-solution convergence check of the solver.
    VerifySolver(VerifySolverArgs),
    /// Attention scaling benchmark.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub low: Option<f64>,
    #[arg(long)]
    pub high: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Dataset path (default `<outdir>/data.bin`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for metrics and checkpoints (default: outdir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_head: Option<usize>,
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub window_stride: Option<usize>,
    /// Hierarchy depth or `auto`.
    #[arg(long)]
    pub levels: Option<String>,
    /// `multipole`, `windowed` or `dense`.
    #[arg(long)]
    pub attention: Option<String>,
    /// `conv` or `avg_pool`.
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub share_du: Option<bool>,
    #[arg(long)]
    pub emb_dropout: Option<f64>,
    #[arg(long)]
    pub att_dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// `n,dim,depth,levels` of the tiny model.
    #[arg(long, default_value = "8,8,2,2")]
    pub dims: String,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Debug: deliberately break the GELU backward rule.
    #[arg(long)]
    pub corrupt_gelu: bool,
}

#[derive(Debug, Args)]
pub struct VerifySolverArgs {
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub sizes: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "dense,windowed,multipole")]
    pub variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub dense_max_n: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
