use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crokit::experiment::{self, Method, Overrides, RunConfig};
use crokit::Result;

#[derive(Parser)]
#[command(name = "crokit", version, about = "Learned uncertainty sets for robust portfolios")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    method: Option<Method>,
    /// CVaR level.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Target miscoverage.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Task-loss weight of the dual objective.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Trust-region steps per robust solve.
    #[arg(long, global = true)]
    tro_steps: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset.
    Generate,
    /// Fit one method on a dataset.
    Train { dataset: PathBuf },
    /// Evaluate a checkpoint on the test split of a dataset.
    Evaluate { checkpoint: PathBuf, dataset: PathBuf },
    /// Tabulate reports, or run the synthetic benchmark when none are given.
    Compare { reports: Vec<PathBuf> },
    /// Rolling-window backtest on daily prices.
    Backtest {
        /// Price CSV; overrides the configured one.
        #[arg(long)]
        prices: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    let overrides = Overrides {
        seed: c.seed,
        out: c.out,
        method: c.method,
        alpha: c.alpha,
        epsilon: c.epsilon,
        gamma: c.gamma,
        tro_steps: c.tro_steps,
        epochs: c.epochs,
        batch: c.batch,
        jobs: c.jobs,
    };
    let mut cfg = RunConfig::load(c.config.as_deref(), &overrides)?;
    if let Some(n) = cfg.jobs {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Generate => {
            let out = experiment::cmd_generate(&cfg)?;
            println!("{}", out.dataset.display());
        }
        Command::Train { dataset } => {
            let ck = experiment::cmd_train(&cfg, &dataset)?;
            println!("{} {}", ck.method, cfg.out.join("checkpoint.json").display());
        }
        Command::Evaluate { checkpoint, dataset } => {
            let r = experiment::cmd_evaluate(&cfg, &checkpoint, &dataset)?;
            println!("{} cvar {:.6} coverage {:.4}", r.method, r.cvar, r.marginal_coverage);
        }
        Command::Compare { reports } => {
            let cmp = experiment::cmd_compare(&cfg, &reports)?;
            for (eps, rows) in &cmp.tables {
                for r in rows {
                    println!(
                        "eps {eps} {:<8} cvar {:.4} coverage {:.4} runs {}",
                        r.method, r.cvar_mean, r.coverage_mean, r.runs
                    );
                }
            }
        }
        Command::Backtest { prices } => {
            if prices.is_some() {
                cfg.backtest.prices = prices;
            }
            let runs = experiment::cmd_backtest(&cfg)?;
            println!("{} runs written to {}", runs.len(), cfg.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CROKIT_LOG", "error")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crokit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
