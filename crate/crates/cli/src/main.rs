use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use bumpmpc_cli::commands::{
    cmd_check, cmd_oracle_compare, cmd_run, OracleOptions, Overrides, RunOptions, DEFAULT_SEED,
};
use clap::{Args, Parser, Subcommand};

/// Speed-bump MPC simulator.
#[derive(Parser)]
#[command(name = "bumpmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModeFlags {
    /// Require steering while on the bump.
    #[arg(long)]
    human_behavior: bool,
    /// Use two-sided indicator rows.
    #[arg(long)]
    strict_indicators: bool,
    /// Prediction horizon N.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write trajectory.csv, report.json and plot_data.dat.
    Run {
        scenario: PathBuf,
        /// Output directory.
        #[arg(short, long, default_value = "out")]
        output: PathBuf,
        #[command(flatten)]
        mode: ModeFlags,
        /// Number of closed-loop steps.
        #[arg(long)]
        sim_steps: Option<usize>,
        /// Write the branch-and-bound trace to trace.log.
        #[arg(long)]
        trace: bool,
        /// Record wall-clock solve times (output is no longer reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Compare branch-and-bound against exhaustive enumeration.
    OracleCompare {
        scenario: PathBuf,
        #[command(flatten)]
        mode: ModeFlags,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Validate a scenario file.
    Check { scenario: PathBuf },
}

fn overrides(mode: ModeFlags, sim_steps: Option<usize>) -> Overrides {
    Overrides {
        human_behavior: mode.human_behavior,
        strict_indicators: mode.strict_indicators,
        horizon: mode.horizon,
        sim_steps,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = io::stdout().lock();
    let mut err = io::stderr().lock();
    let code = match cli.command {
        Command::Run {
            scenario,
            output,
            mode,
            sim_steps,
            trace,
            timing,
        } => {
            let options = RunOptions {
                overrides: overrides(mode, sim_steps),
                trace,
                timing,
            };
            cmd_run(&scenario, &output, &options, &mut out, &mut err).exit_code
        }
        Command::OracleCompare {
            scenario,
            mut mode,
            trials,
            seed,
        } => {
            mode.horizon = mode.horizon.or(Some(2));
            let options = OracleOptions {
                overrides: overrides(mode, None),
                trials,
                seed,
            };
            cmd_oracle_compare(&scenario, &options, &mut out, &mut err)
        }
        Command::Check { scenario } => cmd_check(&scenario, &mut out, &mut err),
    };
    ExitCode::from(code as u8)
}
