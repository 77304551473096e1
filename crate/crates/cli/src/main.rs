use std::path::PathBuf;
use std::process::ExitCode;

use bilevel_cli::commands::{cmd_check, cmd_export, cmd_rates, cmd_run, CommandError, EXIT_OK};
use bilevel_core::checks::CheckLevel;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bilev", version, about = "Bilevel learning of convex regularizers with inexact hypergradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write the run log, checkpoints and plots.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep the schedule grid over seeds and write summary tables.
    Rates {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the oracle self-checks.
    Check {
        #[arg(long, value_enum, default_value_t = Level::Fast)]
        level: Level,
    },
    /// Re-render plots and dump checkpoints of a run directory as CSV.
    Export {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Fast,
    Full,
}

fn init_threads() -> Result<(), CommandError> {
    let Ok(raw) = std::env::var("BILEV_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CommandError::Invalid(format!("BILEV_THREADS: expected a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CommandError::Runtime(e.to_string()))
}

fn finish<T>(r: Result<T, CommandError>) -> i32 {
    match r {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    let code = match cli.command {
        Command::Run { config } => finish(cmd_run(&config)),
        Command::Rates { config } => finish(cmd_rates(&config)),
        Command::Check { level } => cmd_check(match level {
            Level::Fast => CheckLevel::Fast,
            Level::Full => CheckLevel::Full,
        }),
        Command::Export { run } => finish(cmd_export(&run)),
    };
    ExitCode::from(code as u8)
}
