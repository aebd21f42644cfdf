use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use vcl::harness::{self, Experiment, ExperimentConfig, Method, Overrides, RunOptions, RunStatus, DATA_DIR_ENV};
use vcl::trainer::CoresetPolicy;
use vcl::verify;

#[derive(Parser)]
#[command(name = "vcl", version, about = "Variational continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment, resuming from checkpoints in the output directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Stop after training this many further tasks (the run can be resumed).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Run every λ of a grid and report the best.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated grid; defaults to the method's standard grid.
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
    },
    /// Write seed-averaged curves as CSV for every run under a results directory.
    PlotData {
        #[arg(long)]
        results: PathBuf,
        /// e.g. avg_accuracy, accuracy_task1, test_ll_task3
        #[arg(long)]
        figure: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the online regression updates and every gradient against references.
    VerifyOracles {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    experiment: Option<Experiment>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long, value_enum)]
    coreset_policy: Option<CoresetPolicy>,
    #[arg(long)]
    coreset_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Repeat or comma-separate for several seeds.
    #[arg(long = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// 0 trains on the full task at once.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(self, lambda_grid: Option<Vec<f64>>) -> anyhow::Result<ExperimentConfig> {
        let overrides = Overrides {
            experiment: self.experiment,
            method: self.method,
            coreset_policy: self.coreset_policy,
            coreset_size: self.coreset_size,
            lambda: self.lambda,
            lambda_grid,
            seeds: self.seeds,
            epochs: self.epochs,
            batch_size: self.batch_size,
            data_dir: self.data_dir,
            out: self.out,
        };
        // clap has already folded the environment variable into --data-dir
        Ok(ExperimentConfig::resolve(self.config.as_deref(), &overrides, None)?)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run { config, stop_after } => {
            let cfg = config.resolve(None)?;
            let result = harness::run(&cfg, &RunOptions { stop_after })?;
            let manifest = harness::Manifest::load(&cfg.out)?;
            println!(
                "{} {} -> {} ({} records, status {:?})",
                cfg.experiment.name(),
                cfg.method.name(),
                cfg.out.display(),
                result.records.len(),
                manifest.status
            );
            Ok(manifest.status != RunStatus::Failed)
        }
        Command::Sweep { config, lambda_grid } => {
            let cfg = config.resolve(lambda_grid)?;
            if cfg.lambda_grid.is_empty() {
                bail!("method {} has no λ grid", cfg.method.name());
            }
            let report = harness::sweep(&cfg, &RunOptions::default())?;
            for (lambda, score) in &report.scores {
                println!("lambda {lambda:<10} score {score:.6}");
            }
            println!("best lambda {}", report.best_lambda);
            Ok(true)
        }
        Command::PlotData { results, figure, out } => {
            let written = harness::emit_plot_data(&results, &figure, &out)
                .with_context(|| format!("emitting {figure} from {}", results.display()))?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::VerifyOracles { seed } => {
            let mut checks = verify::oracle_suite(seed)?;
            checks.extend(verify::gradient_suite(seed)?);
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            println!("{} checks, {failed} failed", checks.len());
            Ok(failed == 0)
        }
    }
}
