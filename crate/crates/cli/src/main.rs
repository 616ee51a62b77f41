use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deepatrophy_cli::stages::sweep;
use deepatrophy_cli::{run_all, run_stage, CliError, ExperimentConfig, Run, Stage};

#[derive(Parser)]
#[command(
    name = "deepatrophy",
    version,
    about = "Self-supervised progression scoring on synthetic longitudinal scans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort and same-day set.
    Synth,
    /// Register pairs, apply QC and split subjects.
    Preprocess,
    /// Train the network.
    Train,
    /// Score held-out pairs and subjects.
    Score,
    /// Evaluate against ground truth and write the report.
    Eval,
    /// Repeat train, score and eval for each configured RISI weight.
    SweepRisi,
    /// Run every stage in order.
    All {
        /// Skip stages whose outputs are already current.
        #[arg(long)]
        resume: bool,
    },
    /// Print the resolved configuration.
    Config,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = cfg.resolve(cli.seed, cli.out)?;
    let run = Run::new(cfg);
    match cli.command {
        Command::Synth => run_stage(&run, Stage::Synth).map(drop),
        Command::Preprocess => run_stage(&run, Stage::Preprocess).map(drop),
        Command::Train => run_stage(&run, Stage::Train).map(drop),
        Command::Score => run_stage(&run, Stage::Score).map(drop),
        Command::Eval => run_stage(&run, Stage::Eval).map(drop),
        Command::SweepRisi => sweep::run(&run).map(drop),
        Command::All { resume } => run_all(&run, resume),
        Command::Config => {
            print!("{}", run.cfg.to_toml());
            Ok(())
        }
    }
}
