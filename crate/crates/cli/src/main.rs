//! `kdv-backstep`: kernel synthesis, closed-loop simulation, sweeps and
//! spectra from a flat `key = value` configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kdv_backstep::config::{parse_config_in, SimConfig};
use kdv_backstep::error::Error;
use kdv_backstep::scenario::{run_closed_loop, run_spectrum, run_sweep, run_synthesis};

#[derive(Parser)]
#[command(name = "kdv-backstep", version, about = "Boundary observer-based control of the linear KdV equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the gain and observer kernels and write them with their residuals.
    Kernel(Common),
    /// Run the observer-based loop and write trajectory, diagnostics and summary.
    Simulate(Common),
    /// Run the loop for several decay rates.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated decay rates, e.g. `0.5,1,2`.
        #[arg(long, value_name = "a,b,c")]
        lambda_list: String,
    },
    /// Eigenvalues of the discrete closed-loop operator.
    Spectrum(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target decay rate, overriding the configuration.
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of grid nodes, overriding the configuration.
    #[arg(long)]
    grid: Option<usize>,
    /// Output prefix; files are written as `<prefix>_<artifact>.<ext>`.
    #[arg(long)]
    out: Option<String>,
    /// Keep the boundary input at zero while the observer still runs.
    #[arg(long)]
    open_loop: bool,
}

fn load(common: &Common) -> Result<SimConfig, Error> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
                key: "--config".into(),
                message: format!("cannot read {}: {e}", path.display()),
            })?;
            parse_config_in(&text, path.parent())?
        }
        None => SimConfig::default(),
    };
    if let Some(lambda) = common.lambda {
        config = config.with_lambda(lambda)?;
    }
    if let Some(n) = common.grid {
        config = config.with_grid(n)?;
    }
    if let Some(out) = &common.out {
        if out.is_empty() {
            return Err(Error::Config {
                key: "--out".into(),
                message: "must not be empty".into(),
            });
        }
        config.output_prefix = out.clone();
    }
    if common.open_loop {
        config.open_loop = true;
    }
    Ok(config)
}

fn parse_lambda_list(raw: &str) -> Result<Vec<f64>, Error> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>().map_err(|_| Error::Config {
                key: "--lambda-list".into(),
                message: format!("`{s}` is not a number"),
            })
        })
        .collect()
}

fn print_json<T: serde::Serialize>(value: &T) {
    if let Ok(text) = serde_json::to_string_pretty(value) {
        println!("{text}");
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Kernel(common) => print_json(&run_synthesis(&load(&common)?)?),
        Command::Simulate(common) => print_json(&run_closed_loop(&load(&common)?)?),
        Command::Spectrum(common) => print_json(&run_spectrum(&load(&common)?)?),
        Command::Sweep { common, lambda_list } => {
            let lambdas = parse_lambda_list(&lambda_list)?;
            let config = load(&common)?;
            let entries = run_sweep(&config, &lambdas)?;
            for e in entries.iter().filter(|e| e.error.is_some()) {
                eprintln!("lambda = {}: {}", e.lambda, e.error.as_deref().unwrap_or(""));
            }
            print_json(&entries);
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
