//! Command-line front end: generate benchmarks, train the scorer, rank
//! policies, and evaluate rankings, all driven by one JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "soprt",
    version,
    about = "Score and rank reinforcement-learning policies from offline data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; omitted fields take their documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded benchmark: policy families with Monte-Carlo
    /// returns, offline data, and a manifest.
    GenBench {
        #[command(flatten)]
        common: Common,
    },
    /// Train the scorer on the manifest's training policies.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score and rank policies with a trained checkpoint.
    Rank {
        #[command(flatten)]
        common: Common,
        /// Trained model; defaults to the config's checkpoint path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Policy file to rank; repeatable. Defaults to the manifest's
        /// test section.
        #[arg(long = "policy")]
        policies: Vec<PathBuf>,
    },
    /// Compare a ranked result against ground-truth returns.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Ranked result JSON; defaults to the config's ranked path.
        #[arg(long)]
        ranked: Option<PathBuf>,
        /// Benchmark manifest holding true returns.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Manifest section to compare against.
        #[arg(long, default_value = "test")]
        section: String,
        /// Regret cutoff; repeatable. Defaults to the config's list.
        #[arg(long = "k")]
        ks: Vec<usize>,
    },
    /// Distance between the manifest's test policies and its training
    /// policies on the logged states.
    Distance {
        #[command(flatten)]
        common: Common,
        /// Cap on logged states entering the distance.
        #[arg(long)]
        max_states: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenBench { common }
            | Command::Train { common }
            | Command::Rank { common, .. }
            | Command::Eval { common, .. }
            | Command::Distance { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out = out.clone();
    }
    if let Some(threads) = common.threads {
        config.threads = Some(threads);
    }
    config.validate_common()?;
    Ok(config)
}

fn run(command: Command) -> Result<(), CliError> {
    let config = load_config(command.common())?;
    if let Some(threads) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    match command {
        Command::GenBench { .. } => commands::cmd_gen_bench(&config),
        Command::Train { .. } => commands::cmd_train(&config),
        Command::Rank {
            checkpoint,
            policies,
            ..
        } => commands::cmd_rank(&config, checkpoint, &policies),
        Command::Eval {
            ranked,
            manifest,
            section,
            ks,
            ..
        } => commands::cmd_eval(&config, ranked, manifest, &section, &ks),
        Command::Distance { max_states, .. } => commands::cmd_distance(&config, max_states),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
