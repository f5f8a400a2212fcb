use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use rwre_strip::experiments::{run_scenario, Level, ScenarioConfig, Task};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Classify,
    Speed,
    Moments,
    Lln,
    Clt,
    Renewal,
    Evfp,
    Validate,
}

impl From<Command> for Task {
    fn from(c: Command) -> Task {
        match c {
            Command::Classify => Task::Classify,
            Command::Speed => Task::Speed,
            Command::Moments => Task::Moments,
            Command::Lln => Task::Lln,
            Command::Clt => Task::Clt,
            Command::Renewal => Task::Renewal,
            Command::Evfp => Task::Evfp,
            Command::Validate => Task::Validate,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

/// Random walks on a strip in a random environment.
#[derive(Debug, Parser)]
#[command(name = "rwre", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Scenario file (TOML); required for every command except `validate`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the scenario's `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for `summary.json` and CSV files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scale of the validation battery.
    #[arg(long, value_enum)]
    level: Option<LevelArg>,
}

fn config_for(cli: &Cli) -> Result<ScenarioConfig> {
    let task = Task::from(cli.command);
    let mut config = match &cli.config {
        Some(path) => ScenarioConfig::load(path, Some(task)).with_context(|| format!("loading {}", path.display()))?,
        None if matches!(task, Task::Validate) => ScenarioConfig::from_toml_str("", Some(task))?,
        None => bail!("{} needs --config", task.name()),
    };
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = Some(out.clone());
    }
    if let Some(level) = cli.level {
        config.level = match level {
            LevelArg::Fast => Level::Fast,
            LevelArg::Full => Level::Full,
        };
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<bool> {
    let config = config_for(cli)?;
    let bundle = run_scenario(&config)?;
    print!("{}", bundle.summary_json());
    if let Some(dir) = &config.output_dir {
        eprintln!("wrote {} file(s) to {}", bundle.files.len() + 1, dir.display());
    }
    Ok(bundle.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
