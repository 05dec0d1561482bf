use std::path::PathBuf;
use std::process::ExitCode;

use caic_cli::config::ExperimentGrid;
use caic_cli::grid::{run_grid, RunOptions};
use caic_cli::{fit, resolve_threads, CliError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "caic", version, about = "Conditional AIC for mixed models: simulation grids and single fits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation grid and write RB tables (CSV, markdown) and replicate records.
    RunGrid {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the base seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "CAIC_THREADS")]
        threads: Option<usize>,
        /// Omit the timestamp header line so reruns are byte-identical.
        #[arg(long)]
        no_timestamp: bool,
    },
    /// Fit one dataset (CSV with columns t,a,y) and print cAIC by each applicable method.
    Fit {
        data: PathBuf,
        spec: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn run_grid_cmd(
    config: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    threads: Option<usize>,
    no_timestamp: bool,
) -> Result<(), CliError> {
    let mut grid = ExperimentGrid::load(&config)?;
    if let Some(s) = seed {
        grid.reseed(s);
    }
    let opts = RunOptions {
        threads: resolve_threads(threads, grid.threads),
        timestamp: !no_timestamp,
    };
    eprintln!("running {} grid rows on {} threads", grid.rows.len(), opts.threads);
    let outcome = run_grid(&grid, &out, &opts)?;
    for (i, r) in outcome.rows.iter().enumerate() {
        eprintln!("row {}: {}", i + 1, r.status());
    }
    eprintln!("wrote {}", outcome.csv_path.display());
    if outcome.any_failed() {
        return Err(CliError::Numerical("one or more grid rows failed".into()));
    }
    Ok(())
}

fn fit_cmd(data: PathBuf, spec: PathBuf, json: Option<PathBuf>) -> Result<(), CliError> {
    let rec = fit::fit_files(&data, &spec)?;
    print!("{}", fit::render(&rec));
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&rec).map_err(CliError::io)?;
        std::fs::write(&path, text + "\n").map_err(CliError::io)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::RunGrid { config, out, seed, threads, no_timestamp } => {
            run_grid_cmd(config, out, seed, threads, no_timestamp)
        }
        Command::Fit { data, spec, json } => fit_cmd(data, spec, json),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
