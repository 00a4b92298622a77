//! `lacuna` — dataset generation, training, imputation, evaluation, and
//! identity verification for diffusion-based field imputation, driven by a
//! single JSON run configuration.
//!
//! Exit codes: 0 success, 1 invalid configuration or invocation, 2 I/O or
//! generation failure, 3 divergence or failed verification checks. The log
//! level is read from `LACUNA_LOG` (`error`, `info`, or `debug`).

mod commands;
mod config;
mod suites;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lacuna_core::error::{CoreError, Result};

#[derive(Parser)]
#[command(
    name = "lacuna",
    version,
    about = "Diffusion-based imputation of incompletely observed physical fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Directory all outputs are written under (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed override; gen-data replaces the data section's seed with it.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker cap. This build runs a single worker; larger values are
    /// accepted and logged.
    #[arg(long)]
    jobs: Option<usize>,
    /// Request bitwise-reproducible execution (always on in this build).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic PDE dataset with observation masks.
    GenData(Common),
    /// Train a denoiser on a generated dataset.
    Train(Common),
    /// Impute the unobserved entries of every dataset sample.
    Impute(Common),
    /// Score imputed fields against the stored ground truth.
    Eval(Common),
    /// Run analytic identity checks and print a pass/fail table.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Which check suite to run.
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
    },
    /// Estimate query coverage of the configured mask/partition pair.
    DiagMasks(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    /// Training identities: squared-gradient scale and update frequency.
    Thm1,
    /// Posterior identities: variance gap and ensemble error decomposition.
    Thm2,
    /// Pointwise optimum of the weighted objective.
    Lemma1,
    /// Query coverage of the mask/partition pair.
    Masks,
    /// Everything above.
    All,
}

impl From<SuiteArg> for commands::Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Thm1 => commands::Suite::Thm1,
            SuiteArg::Thm2 => commands::Suite::Thm2,
            SuiteArg::Lemma1 => commands::Suite::Lemma1,
            SuiteArg::Masks => commands::Suite::Masks,
            SuiteArg::All => commands::Suite::All,
        }
    }
}

fn init_logging() {
    let level = match std::env::var("LACUNA_LOG").ok().as_deref() {
        None | Some("error") => log::LevelFilter::Error,
        Some("info") => log::LevelFilter::Info,
        Some("debug") => log::LevelFilter::Debug,
        Some(other) => {
            eprintln!(
                "warning: LACUNA_LOG must be one of error|info|debug, got '{other}'; \
                 falling back to error"
            );
            log::LevelFilter::Error
        }
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

/// Loads and validates the config, creates the output directory, and records
/// the advisory flags.
fn prepare(common: &Common) -> Result<config::RunConfig> {
    let cfg = config::load(&common.config)?;
    std::fs::create_dir_all(&common.out)?;
    if let Some(jobs) = common.jobs {
        if jobs > 1 {
            log::info!("--jobs {jobs} requested; this build runs a single worker");
        }
    }
    if common.deterministic {
        log::debug!("deterministic execution requested (always on in this build)");
    }
    Ok(cfg)
}

fn exit_class(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_)
        | CoreError::Shape(_)
        | CoreError::Domain(_)
        | CoreError::Contract(_) => 1,
        CoreError::Io(_)
        | CoreError::Format(_)
        | CoreError::Json(_)
        | CoreError::Generation(_) => 2,
        CoreError::TrainingDivergence { .. }
        | CoreError::Numerical(_)
        | CoreError::EmptyMask(_)
        | CoreError::Infeasible(_)
        | CoreError::InfeasibleConditioning(_) => 3,
    }
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::GenData(c) => {
            let cfg = prepare(c)?;
            commands::gen_data(&cfg, &c.out, c.seed)?;
            Ok(0)
        }
        Command::Train(c) => {
            let cfg = prepare(c)?;
            commands::train(&cfg, &c.out, c.seed.unwrap_or(0))?;
            Ok(0)
        }
        Command::Impute(c) => {
            let cfg = prepare(c)?;
            commands::impute(&cfg, &c.out, c.seed.unwrap_or(0))?;
            Ok(0)
        }
        Command::Eval(c) => {
            let cfg = prepare(c)?;
            commands::eval(&cfg, &c.out, c.seed.unwrap_or(0))?;
            Ok(0)
        }
        Command::Verify { common: c, suite } => {
            let cfg = prepare(c)?;
            let all_pass =
                commands::verify(&cfg, &c.out, c.seed.unwrap_or(0), (*suite).into())?;
            Ok(if all_pass { 0 } else { 3 })
        }
        Command::DiagMasks(c) => {
            let cfg = prepare(c)?;
            commands::diag_masks(&cfg, &c.out, c.seed.unwrap_or(0))?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not failures; bad invocations are
            // configuration errors under the exit-code contract
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_class(&e))
        }
    }
}
