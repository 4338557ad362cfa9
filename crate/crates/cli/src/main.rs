use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use profed_cli::{commands, CliError, RunConfig, RunDir};

#[derive(Parser)]
#[command(
    name = "profed",
    version,
    about = "Proactive federation selection under differential privacy"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: runs/<command>-seed<seed>].
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Configuration override such as `schedule.eta=0.95`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Print σ for each feature count at the configured budget.
    Calibrate,
    /// Release noised contingency bundles for every client.
    Release,
    /// Select a federation by simulated annealing.
    Search,
    /// Run release, selection and FedAvg training end to end.
    Train,
    /// Membership-inference audit across privacy budgets.
    Audit,
    /// Noise-propagation and selection-stability studies.
    Validate,
    /// Fit PFL weights to fairness and utility metrics.
    Weights,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Release => "release",
            Command::Search => "search",
            Command::Train => "train",
            Command::Audit => "audit",
            Command::Validate => "validate",
            Command::Weights => "weights",
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let mut overrides = cli.overrides;
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let name = cli.command.name();
    let root = cli
        .out_dir
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{name}-seed{}", config.seed)));
    let mut out = RunDir::create(root, name, &config)?;
    let command = match cli.command {
        Command::Calibrate => commands::calibrate,
        Command::Release => commands::release,
        Command::Search => commands::search,
        Command::Train => commands::train,
        Command::Audit => commands::audit,
        Command::Validate => commands::validate,
        Command::Weights => commands::weights,
    };
    command(&config, &mut out)?;
    out.finish()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("outputs in {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
