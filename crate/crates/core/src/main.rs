use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use glidepool::engine::{gpu_catalogue, run, write_catalogue_csv, EventLog, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "glidepool",
    version,
    about = "Pilot-based provisioning and matchmaking simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and list every violation.
    Validate { config: PathBuf },
    /// Simulate a scenario and write events.jsonl, metrics.json and catalogue.csv.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Stop the simulation at this time instead of the scenario's duration.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Print the GPU catalogue of an event log as CSV.
    Catalogue { events: PathBuf },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run {
            config,
            seed,
            out,
            until,
        } => {
            let mut scenario = match load(&config) {
                Ok(s) => s,
                Err(code) => return code,
            };
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            if let Some(until) = until {
                scenario.duration_secs = until;
            }
            let (log, metrics) = match run(&scenario) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("{}: {}", config.display(), e);
                    return ExitCode::from(EXIT_INVALID);
                }
            };
            match write_outputs(&out, &log, &metrics) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("cannot write to {}: {}", out.display(), e);
                    ExitCode::from(EXIT_FAILURE)
                }
            }
        }
        Command::Catalogue { events } => {
            let log = match File::open(&events).map(BufReader::new) {
                Ok(r) => EventLog::read_jsonl(r),
                Err(e) => {
                    eprintln!("cannot read {}: {}", events.display(), e);
                    return ExitCode::from(EXIT_FAILURE);
                }
            };
            let log = match log {
                Ok(l) => l,
                Err(e) => {
                    eprintln!("{}: {}", events.display(), e);
                    return ExitCode::from(EXIT_INVALID);
                }
            };
            match write_catalogue_csv(&gpu_catalogue(&log), io::stdout().lock()) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("{}", e);
                    ExitCode::from(EXIT_FAILURE)
                }
            }
        }
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, ExitCode> {
    let config = ScenarioConfig::from_path(path).map_err(|e| {
        eprintln!("{}", e);
        ExitCode::from(EXIT_INVALID)
    })?;
    config.validate().map_err(|e| {
        eprintln!("{}: {}", path.display(), e);
        ExitCode::from(EXIT_INVALID)
    })?;
    Ok(config)
}

fn write_outputs(
    dir: &Path,
    log: &EventLog,
    metrics: &glidepool::engine::Metrics,
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut events = BufWriter::new(File::create(dir.join("events.jsonl"))?);
    log.write_jsonl(&mut events)?;
    events.flush()?;
    let mut m = serde_json::to_string_pretty(metrics)?;
    m.push('\n');
    fs::write(dir.join("metrics.json"), m)?;
    let csv = File::create(dir.join("catalogue.csv"))?;
    write_catalogue_csv(&gpu_catalogue(log), csv).map_err(io::Error::other)?;
    Ok(())
}
