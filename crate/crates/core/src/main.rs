use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ffstack::cli::{self, exit_code, ModelRef, RunConfig, Workspace};
use ffstack::{Error, Result};

#[derive(Parser)]
#[command(name = "ffstack", version, about = "Stacked ensembles of machine-learned force fields")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// base:<id> | ensemble | direct | conserv for train; a model for eval and md.
    #[arg(long, global = true)]
    target: Option<String>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    GenData,
    Train,
    Eval,
    Md,
    SubsetScan,
    Report,
}

fn run(args: &Args) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = args.seed {
        cfg.apply_seed(s);
    }
    let ws = Workspace::open(cfg)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(ws.cfg.jobs)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    let target = || args.target.as_deref().ok_or_else(|| Error::Config("--target is required for this command".into()));
    let written = match args.command {
        Command::GenData => cli::cmd_gen_data(&ws)?,
        Command::Train => cli::cmd_train(&ws, target()?)?,
        Command::Eval => cli::cmd_eval(&ws, &ModelRef::parse(target()?)?)?,
        Command::Md => cli::cmd_md(&ws, &ModelRef::parse(target()?)?)?,
        Command::SubsetScan => cli::cmd_subset_scan(&ws)?,
        Command::Report => cli::cmd_report(&ws)?,
    };
    for p in written {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
