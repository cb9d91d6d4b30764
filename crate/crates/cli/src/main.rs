use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Parser, Subcommand};
use prbench_core::harness::{eval_checkpoint, run_experiment};
use prbench_core::leaderboard::{export_leaderboard, Weights};
use prbench_core::{Error, ExperimentConfig};

/// Robustness training and evaluation benchmark.
#[derive(Debug, Parser)]
#[command(name = "prbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train and evaluate one experiment per config into <out>/<config-hash>/.
    Train {
        /// Experiment config; repeat to queue several runs.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker processes when several configs are given.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a checkpoint with a config's evaluation settings.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank every report.json under <in> and write <out>.{csv,json,html}.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Six numbers (accuracy,ar,pr,prob_acc,ge,time) or family=value pairs.
        #[arg(long, default_value = "1,1,1,1,1,1")]
        weights: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn train_one(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let cfg = ExperimentConfig::from_path(config, seed)?;
    let run = run_experiment(&cfg, out)?;
    println!(
        "{}: clean accuracy {:.4}, {:.2} s/epoch -> {}",
        run.report.method,
        run.report.clean_accuracy,
        run.timing.seconds_per_epoch,
        run.dir.display()
    );
    Ok(())
}

/// Runs each config in its own child process, `jobs` at a time; returns
/// the worst exit code.
fn fan_out(configs: &[PathBuf], out: &Path, seed: Option<u64>, jobs: usize) -> anyhow::Result<u8> {
    let exe = std::env::current_exe()?;
    let mut worst = 0u8;
    for batch in configs.chunks(jobs.max(1)) {
        let mut children = Vec::new();
        for c in batch {
            let mut cmd = Command::new(&exe);
            cmd.arg("train").arg("--config").arg(c).arg("--out").arg(out);
            if let Some(s) = seed {
                cmd.arg("--seed").arg(s.to_string());
            }
            children.push((c, cmd.spawn()?));
        }
        for (c, mut child) in children {
            let code = child.wait()?.code().unwrap_or(1) as u8;
            if code != 0 {
                log::error!("{} exited with {code}", c.display());
            }
            worst = worst.max(code);
        }
    }
    Ok(worst)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Cmd::Train {
            config,
            out,
            seed,
            jobs,
        } => {
            if config.len() == 1 {
                train_one(&config[0], &out, seed)?;
                Ok(0)
            } else {
                fan_out(&config, &out, seed, jobs).map_err(|e| Error::InvalidArgument(format!("{e:#}")))
            }
        }
        Cmd::Eval {
            checkpoint,
            config,
            out,
        } => {
            let cfg = ExperimentConfig::from_path(&config, None)?;
            let report = eval_checkpoint(&checkpoint, &cfg, &out)?;
            println!("clean accuracy {:.4} -> {}", report.clean_accuracy, out.display());
            Ok(0)
        }
        Cmd::Report { input, weights, out } => {
            let weights = Weights::parse(&weights)?;
            let board = export_leaderboard(&input, &weights, &out)?;
            for s in &board.skipped {
                eprintln!("warning: group {s} has a single report and was skipped");
            }
            println!(
                "{} ranked rows in {} groups -> {}.{{csv,json,html}}",
                board.rows().count(),
                board.groups.len(),
                out.with_extension("").display()
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
