//! Command-line front end: reproducible experiments over the filtering
//! stack, file-based inputs, CSV/JSON outputs.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 1 runtime failure.
//! Every run writes into `<out>/<command>-<config hash>/`, each CSV carries
//! a `# config <hash>` comment, and reruns with identical inputs produce
//! identical bytes. Warnings go to stderr only.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::fmt;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "longwave",
    about = "Hybrid polynomial + truncated-spectral graph wavelet experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the normalized Laplacian and write a summary JSON.
    Laplacian(CommonArgs),
    /// Compute (or reuse) a partial eigendecomposition; print residuals.
    Evd(CommonArgs),
    /// Evaluate a filter's spectral response on a λ grid.
    FilterResponse(CommonArgs),
    /// Per-hop energy profiles for polynomial, dense, and hybrid filters.
    Propagate(CommonArgs),
    /// Least-squares Chebyshev fits of a kernel across polynomial orders.
    FitCheb(CommonArgs),
    /// Train a model on a toy task; write trace and checkpoint.
    Train(CommonArgs),
    /// Train the full / no-spectral / no-spatial variants and compare.
    Ablate(CommonArgs),
}

/// One flag set shared by every subcommand; each command validates the
/// subset it uses. A JSON config file may supply any of these; explicit
/// flags win.
#[derive(Args, Clone, Default)]
pub struct CommonArgs {
    /// Graph file path
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Graph format: edge-list | json
    #[arg(long)]
    format: Option<String>,
    /// Retained eigenpairs
    #[arg(long)]
    k: Option<usize>,
    /// Polynomial order
    #[arg(long)]
    rho: Option<usize>,
    /// Spectral basis size
    #[arg(long)]
    z: Option<usize>,
    /// Spectral support cutoff in (0, 2]
    #[arg(long = "lambda-cut")]
    lambda_cut: Option<f64>,
    /// Wavelet branch count J
    #[arg(long)]
    scales: Option<usize>,
    /// Filter bank mode: independent | shared
    #[arg(long)]
    mode: Option<String>,
    /// Branch aggregation: sum | concat-project
    #[arg(long)]
    aggregation: Option<String>,
    /// Residual wiring: standard | wavelet | none
    #[arg(long)]
    residual: Option<String>,
    /// Enforce zero response at λ = 0 on wavelet branches
    #[arg(long)]
    admissible: Option<bool>,
    /// Activation: relu | identity
    #[arg(long)]
    activation: Option<String>,
    /// RNG seed (init, decompositions, task generation)
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Peak learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Output root (default: $LONGWAVE_OUT or ./runs)
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Eigendecomposition cache file to reuse/extend
    #[arg(long = "evd-cache")]
    evd_cache: Option<PathBuf>,
    /// Filter parameter JSON (filter-response)
    #[arg(long)]
    filter: Option<PathBuf>,
    /// Kernel spec, e.g. mexican:8 or constant:1 (propagate, fit-cheb)
    #[arg(long)]
    kernel: Option<String>,
    /// Fit/response grid size
    #[arg(long)]
    grid: Option<usize>,
    /// Comma-separated polynomial orders for fit-cheb
    #[arg(long = "rho-list")]
    rho_list: Option<String>,
    /// Toy task: path | degree | a task JSON path
    #[arg(long)]
    task: Option<String>,
    /// Nodes per generated graph
    #[arg(long = "n-nodes")]
    n_nodes: Option<usize>,
    /// Generated graph count
    #[arg(long = "n-graphs")]
    n_graphs: Option<usize>,
    /// Network depth
    #[arg(long)]
    depth: Option<usize>,
    /// Hidden width
    #[arg(long)]
    width: Option<usize>,
    /// Per-layer MLP depth
    #[arg(long = "mlp-depth")]
    mlp_depth: Option<usize>,
    /// Positional encoding count
    #[arg(long)]
    pe: Option<usize>,
    /// Spectral window: cosine | none
    #[arg(long)]
    window: Option<String>,
    /// Low-pass eigenvalue scale for the shared ladder
    #[arg(long = "lambda-lp")]
    lambda_lp: Option<f64>,
    /// Early-stopping patience (evaluations)
    #[arg(long)]
    patience: Option<usize>,
    /// Decoupled weight decay
    #[arg(long = "weight-decay")]
    weight_decay: Option<f64>,
    /// Warmup steps (default: 5% of total)
    #[arg(long)]
    warmup: Option<usize>,
    /// Readout: node-identity | mean-pool
    #[arg(long)]
    readout: Option<String>,
    /// Source node for propagation profiles
    #[arg(long)]
    source: Option<usize>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable inputs, values out of range. Exit 2.
    Usage(String),
    /// Failures after validation: numerics, output I/O. Exit 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<longwave::Error> for CliError {
    fn from(e: longwave::Error) -> Self {
        use longwave::Error::*;
        match &e {
            Parse { .. } | InvalidArgument(_) | SizeBound { .. } | DimensionMismatch { .. }
            | SelfLoop { .. } | IsolatedNode { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Laplacian(a) => commands::cmd_laplacian(a),
        Command::Evd(a) => commands::cmd_evd(a),
        Command::FilterResponse(a) => commands::cmd_filter_response(a),
        Command::Propagate(a) => commands::cmd_propagate(a),
        Command::FitCheb(a) => commands::cmd_fit_cheb(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Ablate(a) => commands::cmd_ablate(a),
    };
    let code = match result {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            1
        }
    };
    std::process::exit(code);
}
