//! `hamflow`: train, apply, and verify invertible Hamiltonian transport
//! flows between sample domains.

mod commands;
mod config;
mod svg;

use clap::{Parser, Subcommand, ValueEnum};
use commands::Failure;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "hamflow",
    version,
    about = "Invertible Hamiltonian transport flows: adversarial training, \
             translation, and structural verification"
)]
struct Cli {
    /// Run configuration JSON (required by train, verify, sweep).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seeds (training root seed and metric seed),
    /// or set the sampling seed for `sample`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    A,
    B,
}

#[derive(Subcommand)]
enum Cmd {
    /// Adversarially train a transport flow; writes checkpoints, history
    /// CSV, and summary metrics into the output directory.
    Train,
    /// Push a sample batch (CSV) through a trained flow.
    Translate {
        /// Checkpoint directory (flow.json, disc.json, optim.json, config.json).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input batch CSV.
        #[arg(long)]
        input: PathBuf,
        /// Output batch CSV.
        #[arg(long)]
        output: PathBuf,
        /// Integrate backwards (target domain to source domain).
        #[arg(long)]
        reverse: bool,
        /// Also write one full trajectory CSV per sample next to the output.
        #[arg(long)]
        save_trajectory: bool,
    },
    /// Translate backwards; shorthand for `translate --reverse`.
    Reverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        save_trajectory: bool,
    },
    /// Check a checkpoint against structural thresholds; writes
    /// verification.json. Exit 3 if any check fails.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Integrate past the trained horizon, reporting transport metrics per
    /// time slice; writes sweep.csv and sweep.svg.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Draw samples from a built-in benchmark side or a domain JSON file.
    Sample {
        /// Built-in benchmark name.
        #[arg(long, conflicts_with = "domain")]
        benchmark: Option<String>,
        /// Which side of the benchmark to sample.
        #[arg(long, value_enum, default_value = "a")]
        side: Side,
        /// Domain JSON file (alternative to --benchmark).
        #[arg(long)]
        domain: Option<PathBuf>,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Output CSV path.
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    });
}

fn require_config(cli: &Cli) -> Result<(config::RunConfig, PathBuf), Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::config("--config PATH is required for this command"))?;
    config::load_run_config(path, cli.seed, cli.out.as_deref())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::Train => {
            let (cfg, base) = require_config(&cli)?;
            commands::cmd_train(&cfg, &base)
        }
        Cmd::Translate {
            checkpoint,
            input,
            output,
            reverse,
            save_trajectory,
        } => commands::cmd_translate(checkpoint, input, output, *reverse, *save_trajectory),
        Cmd::Reverse {
            checkpoint,
            input,
            output,
            save_trajectory,
        } => commands::cmd_translate(checkpoint, input, output, true, *save_trajectory),
        Cmd::Verify { checkpoint } => {
            let (cfg, base) = require_config(&cli)?;
            commands::cmd_verify(&cfg, &base, checkpoint)
        }
        Cmd::Sweep { checkpoint } => {
            let (cfg, base) = require_config(&cli)?;
            commands::cmd_sweep(&cfg, &base, checkpoint)
        }
        Cmd::Sample {
            benchmark,
            side,
            domain,
            n,
            output,
        } => commands::cmd_sample(
            benchmark.as_deref(),
            match side {
                Side::A => 'a',
                Side::B => 'b',
            },
            domain.as_deref(),
            *n,
            cli.seed.unwrap_or(0),
            output,
        ),
    }
}
