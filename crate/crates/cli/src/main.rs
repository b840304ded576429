use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use snewt::experiment::{
    format_named_matrices, oracle_matrices, parse_config, run_experiment, slope_from_csv,
    write_outputs, ExperimentError, DEFAULT_TAIL,
};

#[derive(Parser)]
#[command(
    name = "snewt",
    version,
    about = "Sketched Newton experiments with online covariance inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the limiting covariance and its ingredients for a config.
    Oracle {
        config: PathBuf,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run all replications and write the aggregate and summary CSVs.
    Run { config: PathBuf },
    /// Log-log slope of an error column over the tail of an aggregate CSV.
    Slope {
        csv: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAIL)]
        tail: f64,
        #[arg(long, default_value = "rel_cov_err_wsc")]
        column: String,
    },
}

fn read(path: &PathBuf) -> Result<String, ExperimentError> {
    std::fs::read_to_string(path).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Oracle { config, out } => {
            let cfg = parse_config(&config)?;
            let text = format_named_matrices(&oracle_matrices(&cfg)?);
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| ExperimentError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                }),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Run { config } => {
            let cfg = parse_config(&config)?;
            let report = run_experiment(&cfg)?;
            write_outputs(&cfg, &report)?;
            for row in &report.summary {
                let show =
                    |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<10} coverage {} (trajectory {}), rel_cov_err {}, rel_var_err {}",
                    row.estimator,
                    show(row.final_coverage),
                    show(row.mean_trajectory_coverage),
                    show(row.final_rel_cov_err),
                    show(row.final_rel_var_err),
                );
            }
            report.check_divergence()
        }
        Command::Slope { csv, tail, column } => {
            let slope = slope_from_csv(&read(&csv)?, &column, tail)?;
            println!("{slope}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
