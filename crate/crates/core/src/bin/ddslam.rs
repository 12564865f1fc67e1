use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ddslam::io::{cmd_eval, cmd_run, cmd_simulate, cmd_sweep, thread_limit, Overrides};
use ddslam::{Mode, Result};

#[derive(Parser)]
#[command(name = "ddslam", version, about = "Acoustic SLAM with IMU, DoA and DRR distance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dd,
    BearingOnly,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dd => Mode::Dd,
            ModeArg::BearingOnly => Mode::BearingOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario and write it as a frame file.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the filter over a frame file and write a trace.
    Run {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        particles: Option<usize>,
    },
    /// Compute metrics for a trace.
    Eval {
        trace: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat simulate + run over several particle counts.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated particle counts.
        #[arg(long, value_delimiter = ',', default_values_t = [5, 8, 10, 15, 20])]
        particles: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        replicates: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
}

fn execute(cli: Cli) -> Result<()> {
    let threads = thread_limit()?;
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let ov = Overrides { seed, threads, ..Default::default() };
            let sc = cmd_simulate(config.as_deref(), &out, &ov)?;
            println!("wrote {} frames to {}", sc.frames.len(), out.display());
        }
        Command::Run { frames, config, out, mode, seed, particles } => {
            let ov = Overrides { seed, particles, mode: mode.map(Mode::from), threads };
            let trace = cmd_run(&frames, config.as_deref(), &out, &ov)?;
            println!("wrote {} trace rows to {}", trace.records.len(), out.display());
        }
        Command::Eval { trace, out } => {
            println!("{}", cmd_eval(&trace, out.as_deref())?);
        }
        Command::Sweep { config, out, particles, replicates, seed, mode } => {
            let ov = Overrides { seed, mode: mode.map(Mode::from), threads, ..Default::default() };
            for row in cmd_sweep(config.as_deref(), &particles, replicates, &out, &ov)? {
                println!("I = {:>3}  mean {:.4} m  max {:.4} m", row.particles, row.mean_error(), row.max_error());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
