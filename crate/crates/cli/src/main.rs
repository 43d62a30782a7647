use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skydmd::cli_io::{run_forecast_command, run_synth_command, RunConfig};

#[derive(Parser)]
#[command(name = "skydmd", about = "Sky-image clear-sky-index forecasting with DMD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the forecasting pipeline described by a JSON config.
    Forecast {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render a synthetic scenario to 16-bit PGM frames and truth.json.
    Synth {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the version.
    Version,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Forecast { config } => RunConfig::from_file(&config)
            .and_then(|cfg| run_forecast_command(&cfg))
            .map(|report| {
                let s = &report.summary;
                println!(
                    "{} forecasts; first dissolution step dmd {:?}, frozen {:?}",
                    report.rows.len(),
                    s.first_dissolution_step.dmd,
                    s.first_dissolution_step.frozen_advection
                );
            }),
        Command::Synth {
            scenario,
            seed,
            out,
        } => run_synth_command(&scenario, seed, &out).map(|truth| {
            println!("{} frames written to {}", truth.k.len(), out.display());
        }),
        Command::Version => {
            println!("skydmd {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
