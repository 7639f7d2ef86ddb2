use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rwalk_cli::commands::{self, OracleArgs, OracleKind, RadiusArg, Report};
use rwalk_cli::config::RunConfig;
use rwalk_cli::{resolve_threads, CliError};

#[derive(Parser)]
#[command(
    name = "rwalk",
    version,
    about = "Return probabilities and local limit classification of random walks"
)]
struct Cli {
    /// Worker threads (default: RWALK_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Return probabilities as CSV.
    Convolve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        prune: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-th derivative of the Green function at r.
    Green {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        r: f64,
        #[arg(long, default_value_t = 0)]
        k: usize,
    },
    /// Spectral radius estimate with diagnostics.
    SpectralRadius {
        #[arg(long)]
        config: PathBuf,
    },
    /// First-return kernel to a factor and its displacement matrix.
    FirstReturn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        factor: usize,
        #[arg(long)]
        eta: Option<f64>,
        /// Absolute argument r.
        #[arg(long, conflicts_with = "r_frac")]
        r: Option<f64>,
        /// r as a fraction of the radius of convergence.
        #[arg(long)]
        r_frac: Option<f64>,
        /// Rows of the induced return series (0 skips it).
        #[arg(long, default_value_t = 0)]
        induced: usize,
    },
    /// Classification report.
    Classify {
        #[arg(long)]
        config: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Classify, fit and compare exponents.
    VerifyLlt {
        #[arg(long)]
        config: PathBuf,
    },
    /// Oracle series as CSV.
    Oracle {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 1024)]
        steps: usize,
        /// Rank of the free group (radial-free).
        #[arg(long, default_value_t = 2)]
        rank: u32,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        kappa: f64,
        /// Measure for the dense oracle.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    BinomialZ,
    RadialFree,
    Synthetic,
    Dense,
}

fn load(path: &Path, overrides: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    overrides(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Report, CliError> {
    let config_threads = match &cli.command {
        Command::Convolve { config, .. }
        | Command::Green { config, .. }
        | Command::SpectralRadius { config }
        | Command::FirstReturn { config, .. }
        | Command::Classify { config, .. }
        | Command::VerifyLlt { config } => RunConfig::load(config).ok().and_then(|c| c.threads),
        Command::Oracle { .. } => None,
    };
    let env = std::env::var("RWALK_THREADS").ok();
    let threads = resolve_threads(cli.threads.or(config_threads), env.as_deref());
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;

    match cli.command {
        Command::Convolve {
            config,
            steps,
            prune,
            out,
        } => {
            let cfg = load(&config, |c| {
                if let Some(n) = steps {
                    c.steps = n;
                }
                if let Some(e) = prune {
                    c.prune_eps = e;
                }
            })?;
            commands::convolve(&cfg, out.as_deref())
        }
        Command::Green { config, r, k } => commands::green(&load(&config, |_| {})?, r, k),
        Command::SpectralRadius { config } => commands::spectral_radius(&load(&config, |_| {})?),
        Command::FirstReturn {
            config,
            factor,
            eta,
            r,
            r_frac,
            induced,
        } => {
            let cfg = load(&config, |c| {
                if let Some(h) = eta {
                    c.eta = h;
                }
            })?;
            let at = match (r, r_frac) {
                (Some(r), None) => RadiusArg::Absolute(r),
                (None, Some(f)) => RadiusArg::Fraction(f),
                _ => {
                    return Err(CliError::Config(
                        "give exactly one of --r and --r-frac".into(),
                    ))
                }
            };
            commands::first_return(&cfg, factor, cfg.eta, at, induced)
        }
        Command::Classify { config, json } => {
            commands::classify(&load(&config, |_| {})?, json.as_deref())
        }
        Command::VerifyLlt { config } => commands::verify_llt(&load(&config, |_| {})?),
        Command::Oracle {
            kind,
            steps,
            rank,
            rho,
            alpha,
            kappa,
            config,
            out,
        } => {
            let cfg = config.map(|p| load(&p, |_| {})).transpose()?;
            let kind = match kind {
                Kind::BinomialZ => OracleKind::BinomialZ,
                Kind::RadialFree => OracleKind::RadialFree,
                Kind::Synthetic => OracleKind::Synthetic,
                Kind::Dense => OracleKind::Dense,
            };
            let args = OracleArgs {
                kind,
                steps,
                rank,
                rho,
                alpha,
                kappa,
            };
            commands::oracle(&args, cfg.as_ref(), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(report.stdout.as_bytes());
            let _ = out.flush();
            ExitCode::from(report.code)
        }
        Err(e) => {
            eprintln!("rwalk: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
