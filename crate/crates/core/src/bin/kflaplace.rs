use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kflaplace::curvature::CurvatureMethod;
use kflaplace::experiment::{
    collect_metrics, emit_plot_data, grid_sweep, parse_enum, run_experiment, ExperimentConfig, Method,
};
use kflaplace::{Error, Result};

#[derive(Parser)]
#[command(name = "kflaplace", version, about = "Continual learning with Kronecker-factored online Laplace")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// TOML or JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// online | per-task | approximate | joint-baseline | none-baseline
    #[arg(long, value_parser = parse_enum::<Method>)]
    method: Option<Method>,
    /// diag | kf | kf-gn
    #[arg(long, value_parser = parse_enum::<CurvatureMethod>)]
    curvature: Option<CurvatureMethod>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// MNIST directory (overrides the config and KFLAPLACE_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train over the task stream once.
    Run {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// One run per lambda; picks the best by final mean validation accuracy.
    Sweep {
        #[command(flatten)]
        common: Overrides,
        /// Comma-separated grid, e.g. 1,3,10,30,100.
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
    /// Convert run directories into one tidy accuracy CSV.
    PlotData {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(o: &Overrides) -> Result<ExperimentConfig> {
    let mut c = match &o.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = o.method {
        c.method = m;
    }
    if let Some(v) = o.curvature {
        c.curvature = v;
    }
    if let Some(v) = o.tasks {
        c.num_tasks = v;
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = &o.out {
        c.out_dir = v.clone();
    }
    if let Some(v) = &o.data {
        c.data_dir = Some(v.clone());
    }
    Ok(c)
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, lambda } => {
            let mut c = load_config(&common)?;
            if let Some(l) = lambda {
                c.lambda = l;
            }
            let outcome = run_experiment(&c)?;
            let last = outcome.metrics.last();
            println!(
                "after task {}: mean {:.4} min {:.4} max {:.4} first {:.4} last {:.4}",
                last.after_task, last.mean, last.min, last.max, last.first, last.last
            );
            println!("results in {}", c.out_dir.display());
        }
        Command::Sweep { common, lambdas } => {
            let c = load_config(&common)?;
            let summary = grid_sweep(&c, &lambdas)?;
            println!("lambda\tval_mean\ttest_mean\tfirst\tlast");
            let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            for e in &summary.entries {
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    e.lambda,
                    show(e.final_val_mean),
                    show(e.final_test_mean),
                    show(e.final_first),
                    show(e.final_last)
                );
            }
            println!("best lambda: {}", summary.best_lambda);
        }
        Command::PlotData { input, out } => {
            let runs = collect_metrics(&input)?;
            let text = emit_plot_data(&runs)?;
            fs::write(&out, text).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
