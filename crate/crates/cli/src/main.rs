use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use kdl_cli::commands::{self, RunContext};
use kdl_cli::config::ExperimentConfig;
use kdl_cli::standin::write_stand_ins;

#[derive(Parser)]
#[command(name = "kdl", version, about = "Physics-regularised forecasting experiments on forced Liénard dynamics")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the benchmark grid.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the oscillator and write trajectory.csv.
    Simulate,
    /// Train the forecaster on the simulated corpus with the forced residual penalty.
    Pretrain,
    /// Fine-tune on one dataset split with the operator penalty.
    Finetune {
        #[arg(long)]
        dataset: Option<String>,
        /// Training fraction, e.g. 0.8 for an 80:20 split.
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        no_pretrain: bool,
    },
    /// Score a predictions CSV, or a checkpoint on a dataset split.
    Evaluate {
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Sampling interval of the predictions file.
        #[arg(long, default_value_t = 1.0)]
        dt_sample: f64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
    },
    /// Run every (dataset, split, model, seed) cell and rank the models.
    Benchmark,
    /// Multiple-comparisons-with-the-best ranking of a metrics CSV.
    Rank {
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Write synthetic files shaped like the benchmark datasets.
    MakeSyntheticStandIn {
        #[arg(long)]
        max_len: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let ctx = RunContext::new(cfg, cli.out, cli.seed, cli.jobs)?;
    match cli.command {
        Command::Simulate => {
            println!("{}", commands::cmd_simulate(&ctx)?.display());
        }
        Command::Pretrain => {
            for p in commands::cmd_pretrain(&ctx)? {
                println!("{}", p.display());
            }
        }
        Command::Finetune { dataset, split, checkpoint, no_pretrain } => {
            for p in commands::cmd_finetune(&ctx, dataset.as_deref(), split, checkpoint.as_deref(), no_pretrain)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate { predictions, dt_sample, checkpoint, dataset, split } => {
            let rows = match (predictions, checkpoint) {
                (Some(p), _) => commands::cmd_evaluate_predictions(&ctx, &p, dt_sample)?,
                (None, Some(c)) => commands::cmd_evaluate_checkpoint(&ctx, &c, dataset.as_deref(), split)?,
                (None, None) => bail!("evaluate needs --predictions or --checkpoint"),
            };
            for r in rows {
                println!("{} {} {} seed {}: rmse {:.6} mae {:.6} pic {:.6}", r.dataset, r.model, r.split, r.seed, r.rmse, r.mae, r.pic);
            }
        }
        Command::Benchmark => {
            let report = commands::cmd_benchmark(&ctx)?;
            if let Some(rank) = &report.rmse_rank {
                for e in rank.sorted() {
                    println!("{:<8} rmse rank {:.3} [{:.3}, {:.3}]", e.model, e.avg_rank, e.lower(), e.upper());
                }
            }
            if report.failed > 0 {
                eprintln!("{} of {} cells failed; see metrics.csv", report.failed, report.rows.len());
                return Ok(false);
            }
        }
        Command::Rank { metrics } => {
            let (rmse, _) = commands::cmd_rank(&ctx, &metrics)?;
            for e in rmse.sorted() {
                println!("{:<8} rmse rank {:.3} [{:.3}, {:.3}]", e.model, e.avg_rank, e.lower(), e.upper());
            }
        }
        Command::MakeSyntheticStandIn { max_len } => {
            for p in write_stand_ins(&ctx.out, &ctx.cfg.lienard, max_len)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
