mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use peps_core::PepsError;

use commands::{ConstructKind, EvalArgs, LogRatioArgs, NormChoice};

/// Train, sample and evaluate PEPS Born machines on binary images.
#[derive(Parser)]
#[command(name = "peps", version)]
struct Cli {
    /// Run configuration (TOML with dotted section keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set training.max_iters=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Norm {
    /// Normalize bare models by exact enumeration.
    #[arg(long)]
    exact: bool,
    /// Samples for estimating the norm of bare models.
    #[arg(long, default_value_t = 1000)]
    norm_samples: usize,
    #[arg(long, default_value_t = 0)]
    norm_seed: u64,
}

impl Norm {
    fn choice(&self) -> NormChoice {
        NormChoice {
            exact: self.exact,
            samples: self.norm_samples,
            seed: self.norm_seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset caches and the mode manifest.
    Prepare,
    /// Train one mode on its prepared data.
    Train {
        #[arg(long, default_value_t = 0)]
        mode: usize,
        /// Record elapsed seconds in the report instead of zeros.
        #[arg(long)]
        wall_time: bool,
    },
    /// Combine trained modes into a mixture weighted by example counts.
    Mix {
        /// Comma-separated mode ids; all modes when omitted.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<usize>,
    },
    /// Draw samples from a model or mixture.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Boundary bond cap; 0 is exact.
        #[arg(long)]
        chi: Option<usize>,
        /// Output prefix; `.pds` and `.pgm` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Negative log-likelihood of a dataset cache.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        chi: Option<usize>,
        #[command(flatten)]
        norm: Norm,
        /// Per-example log-probabilities CSV.
        #[arg(long)]
        log_probs: Option<PathBuf>,
        /// Summary CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of log P(x) − log Q(x) over samples of P.
    Logratio {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        chi: Option<usize>,
        #[command(flatten)]
        norm: Norm,
        #[arg(long, default_value_t = 1.0)]
        bin_width: f64,
        /// Output prefix; `-samples.csv` and `-hist.csv` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a hand-built model.
    Construct {
        #[command(subcommand)]
        kind: Construct,
        #[arg(long, global = true)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Construct {
    /// Exact bars-and-stripes model.
    BarsStripes {
        #[arg(long, default_value_t = 4)]
        side: usize,
    },
    /// Ising Boltzmann weights as squared amplitudes.
    Ising {
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value_t = 3)]
        height: usize,
        #[arg(long, default_value_t = 3)]
        width: usize,
    },
    /// Entries drawn uniformly from [0, 1).
    Random {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        phys_dim: usize,
        #[arg(long, default_value_t = 2)]
        bond_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &PepsError) -> u8 {
    match e {
        PepsError::Io { .. } => 1,
        PepsError::Shape(_) | PepsError::Index(_) | PepsError::Input(_) | PepsError::EmptyMode(_) => 3,
        PepsError::Format { .. } => 4,
        PepsError::Numeric(_)
        | PepsError::Degenerate { .. }
        | PepsError::InfiniteNll { .. }
        | PepsError::InfiniteGradient { .. }
        | PepsError::NoSupport => 5,
        PepsError::Capacity(_) => 6,
    }
}

fn run(cli: Cli) -> Result<(), PepsError> {
    let cfg = config::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Prepare => commands::prepare(&cfg),
        Command::Train { mode, wall_time } => commands::train(&cfg, mode, wall_time),
        Command::Mix { modes } => commands::mix(&cfg, &modes),
        Command::Sample { model, n, seed, chi, out } => commands::sample(
            &model,
            n.unwrap_or(cfg.sampling.n),
            seed.unwrap_or(cfg.sampling.seed),
            chi.or(cfg.sampling.chi),
            &out,
        ),
        Command::Eval { model, data, chi, norm, log_probs, out } => commands::eval(&EvalArgs {
            model: &model,
            data: &data,
            norm: norm.choice(),
            chi: chi.or(cfg.sampling.chi),
            log_probs: log_probs.as_deref(),
            out: out.as_deref(),
        }),
        Command::Logratio { p, q, n, seed, chi, norm, bin_width, out } => {
            commands::logratio(&LogRatioArgs {
                p: &p,
                q: &q,
                n,
                seed,
                chi: chi.or(cfg.sampling.chi),
                norm: norm.choice(),
                bin_width,
                out: &out,
            })
        }
        Command::Construct { kind, out } => {
            let out = out.ok_or_else(|| PepsError::Input("construct needs --out".into()))?;
            let kind = match kind {
                Construct::BarsStripes { side } => ConstructKind::BarsStripes { side },
                Construct::Ising { beta, height, width } => ConstructKind::Ising { beta, height, width },
                Construct::Random { height, width, phys_dim, bond_dim, seed } => {
                    ConstructKind::Random { height, width, phys_dim, bond_dim, seed }
                }
            };
            commands::construct(&kind, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
