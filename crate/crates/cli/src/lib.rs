//! Command-line driver: `train`, `sigprop`, `params`, `bench`, `duality`,
//! `plot` and `keys`.

pub mod commands;
pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use simpleformer::blocks::BlockKind;
use simpleformer::optim::{DualityConfig, DualityOptimizer};

use commands::{BenchArgs, ProbeKind, SigpropArgs};
use config::ConfigErrors;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(ConfigErrors),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("plot: {0}")]
    Plot(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] simpleformer::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use simpleformer::Error as E;
        match self {
            CliError::Check(_) | CliError::Core(E::DualityDivergence { .. }) => EXIT_CHECK,
            CliError::Core(E::NonFinite { .. } | E::NonFiniteLoss { .. }) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "simpleformer", version, about = "Train and inspect simplified transformer blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProbeArg {
    Gaussian,
    Tokens,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AxisArg {
    Step,
    WallSeconds,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes log.csv, timed_log.csv, model.ckpt and resolved_config.
    Train { config: PathBuf },
    /// Activation statistics at initialisation over depths and seeds.
    Sigprop {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "18,72")]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value = "gaussian")]
        probe: ProbeArg,
        /// Sequences in the probe batch.
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// CSV path (default {out}/sigprop.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-tensor parameter counts and forward FLOPs.
    Params {
        config: PathBuf,
        /// Also report the reduction relative to this block kind.
        #[arg(long, value_parser = commands::parse_kind)]
        against: Option<BlockKind>,
    },
    /// Mean optimizer step time per block kind.
    Bench {
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, value_delimiter = ',', value_parser = commands::parse_kind, default_value = "preln,sas,sasp")]
        kinds: Vec<BlockKind>,
        /// Exit with status 3 unless sasp is faster than preln and sas is no slower.
        #[arg(long)]
        check: bool,
    },
    /// Reparameterisation duality on a toy regression.
    Duality {
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, value_parser = commands::parse_optimizer, default_value = "sgd")]
        optimizer: DualityOptimizer,
        /// Defaults to 1e-10 for sgd and 1e-6 for adamw.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Line chart of one column against step or wall time.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "step")]
        x: AxisArg,
        #[arg(long, default_value = "train_loss")]
        y: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// List every configuration key.
    Keys,
}

/// Runs one command, printing results to stdout.
pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train { config } => {
            let cfg = commands::load_config(&config)?;
            let s = commands::train(&cfg)?;
            let eval = s.final_eval_loss.map_or("-".to_string(), |v| format!("{v:.4}"));
            println!("final train loss {:.4}  eval loss {eval}  ({} log rows)", s.final_train_loss, s.log.rows.len());
        }
        Command::Sigprop { config, depths, seeds, probe, batch, out } => {
            let cfg = commands::load_config(&config)?;
            let probe = match probe {
                ProbeArg::Gaussian => ProbeKind::Gaussian,
                ProbeArg::Tokens => ProbeKind::Tokens,
            };
            let reports = commands::sigprop(&cfg, &SigpropArgs { depths, seeds, probe, batch, out })?;
            for r in &reports {
                if let Some(l) = r.last() {
                    println!(
                        "depth {:>3} seed {:>3}  final rms {:.4}  cosine {:.4}  rank collapse {:.4}{}",
                        r.depth,
                        r.seed,
                        l.rms,
                        l.mean_cosine,
                        l.rank_collapse,
                        if l.finite { "" } else { "  (non-finite)" }
                    );
                }
            }
        }
        Command::Params { config, against } => {
            let cfg = commands::load_config(&config)?;
            print!("{}", commands::params(&cfg, against)?.table);
        }
        Command::Bench { config, steps, warmup, kinds, check } => {
            let cfg = commands::load_config(&config)?;
            let rows = commands::bench(&cfg, &BenchArgs { kinds, steps, warmup })?;
            for r in &rows {
                println!("{:<12} {:.5} s/step  {:.1} tokens/s", r.kind.name(), r.mean_step_seconds, r.tokens_per_second);
            }
            let failed: Vec<String> = commands::bench_checks(&rows)
                .into_iter()
                .map(|(msg, ok)| {
                    println!("{} {msg}", if ok { "PASS" } else { "FAIL" });
                    (msg, ok)
                })
                .filter(|(_, ok)| !ok)
                .map(|(msg, _)| msg)
                .collect();
            if check && !failed.is_empty() {
                return Err(CliError::Check(failed.join("; ")));
            }
        }
        Command::Duality { beta, steps, optimizer, tolerance, seed } => {
            let mut cfg = DualityConfig::new(optimizer, beta, steps);
            cfg.seed = seed;
            if let Some(t) = tolerance {
                cfg.tolerance = t;
            }
            let report = commands::duality(&cfg)?;
            println!(
                "PASS {} beta={beta} steps={steps}: max divergence {:.3e} <= {:.1e}",
                optimizer.name(),
                report.max_divergence,
                cfg.tolerance
            );
        }
        Command::Plot { csv, x, y, out } => {
            let x = match x {
                AxisArg::Step => "step",
                AxisArg::WallSeconds => "wall_seconds",
            };
            let n = plot::plot(&csv, x, &y, &out)?;
            println!("wrote {} ({n} series)", out.display());
        }
        Command::Keys => print!("{}", config::reference()),
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
