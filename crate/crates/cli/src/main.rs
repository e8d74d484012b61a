use std::path::PathBuf;
use std::process::ExitCode;

use caiba_cli::{run_scenarios, timing_budget, write_vectors, CliError, RunRequest, DEFAULT_SIGNAL_SPEED, EXIT_FAILURE, EXIT_OK};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "caiba", version, about = "Bit-level CAN bus simulator with in-flight source authentication")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more scenario files.
    Run {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Output directory for metrics.json, verdicts.csv and wire_trace.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record the resolved wire level.
        #[arg(long)]
        trace: bool,
        /// Bus position of the trace probe in meters (default: first receiver).
        #[arg(long, requires = "trace")]
        trace_at: Option<f64>,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the tag width.
        #[arg(long, value_parser = ["8", "16", "24"])]
        tag_width: Option<String>,
        /// Scenarios run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Worst-case overwrite delay against the sample point.
    TimingBudget {
        #[arg(long)]
        bitrate: u32,
        /// Bus length in meters.
        #[arg(long)]
        length: f64,
        #[arg(long)]
        transceiver_ns: f64,
        /// Time quanta per bit.
        #[arg(long, default_value_t = 10)]
        quanta: u16,
        #[arg(long, default_value_t = DEFAULT_SIGNAL_SPEED)]
        signal_speed: f64,
        /// Print only the JSON report.
        #[arg(long)]
        json: bool,
    },
    /// Regenerate the golden vector files.
    Vectors {
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run {
            configs,
            out,
            trace,
            trace_at,
            seed,
            tag_width,
            jobs,
        } => {
            let req = RunRequest {
                configs,
                out,
                trace,
                trace_at_m: trace_at,
                seed,
                tag_width: tag_width.map(|w| w.parse().expect("validated by clap")),
                jobs,
            };
            let reports = run_scenarios(&req)?;
            for r in &reports {
                println!("{}", r.summary());
            }
            Ok(if reports.iter().all(|r| r.passed()) { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::TimingBudget {
            bitrate,
            length,
            transceiver_ns,
            quanta,
            signal_speed,
            json,
        } => {
            let report = timing_budget(bitrate, length, transceiver_ns, quanta, signal_speed)?;
            if !json {
                print!("{}", report.table());
            }
            println!("{}", report.json());
            Ok(if report.budget.pass { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Vectors { out } => {
            for p in write_vectors(&out)? {
                println!("{}", p.display());
            }
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
