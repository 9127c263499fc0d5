use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sovsim::sim::scenario::parse_nonce;
use sovsim::sim::{check, load_scenario, run, Scenario};

#[derive(Parser)]
#[command(name = "sovsim", version, about = "Sovereign smartphone security monitor simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and emit its trace.
    Run {
        scenario: PathBuf,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        until: Option<u64>,
    },
    /// Judge properties P1 to P5 on a scenario.
    Check { scenario: PathBuf },
    /// Run to the first attestation of a sapp and print the report line.
    Attest {
        scenario: PathBuf,
        #[arg(long)]
        sapp: usize,
        /// 32-byte nonce as 64 hex digits.
        #[arg(long)]
        nonce: String,
    },
}

const SCENARIO_ERROR: u8 = 2;

fn load(path: &PathBuf) -> Result<Scenario, ExitCode> {
    load_scenario(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(SCENARIO_ERROR)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) | Err(code) => code,
    }
}

fn execute(command: Command) -> Result<ExitCode, ExitCode> {
    match command {
        Command::Run {
            scenario,
            trace,
            seed,
            until,
        } => {
            let mut sc = load(&scenario)?;
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            if let Some(until) = until {
                sc.until_ms = until;
            }
            let text = run(&sc).trace.render();
            match trace {
                Some(path) => std::fs::write(&path, text).map_err(|e| {
                    eprintln!("error: cannot write {}: {e}", path.display());
                    ExitCode::FAILURE
                })?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { scenario } => {
            let sc = load(&scenario)?;
            let report = check(&sc);
            print!("{report}");
            Ok(if report.all_pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Attest {
            scenario,
            sapp,
            nonce,
        } => {
            let sc = load(&scenario)?;
            let nonce = parse_nonce(&nonce).map_err(|e| {
                eprintln!("error: {e}");
                ExitCode::from(SCENARIO_ERROR)
            })?;
            if sapp >= sc.sapps.len() {
                eprintln!("error: scenario has no sapp {sapp}");
                return Err(ExitCode::from(SCENARIO_ERROR));
            }
            let Some(sc) = sc.until_first_attestation(sapp, nonce) else {
                eprintln!("error: the script never creates sapp {sapp}");
                return Err(ExitCode::FAILURE);
            };
            let out = run(&sc);
            let report = out
                .reports
                .iter()
                .rev()
                .find(|r| r.sapp == sapp && r.report.nonce == nonce);
            match report {
                Some(r) => {
                    println!("{}", r.report);
                    Ok(ExitCode::SUCCESS)
                }
                None => {
                    eprintln!("error: sapp {sapp} could not be attested");
                    Err(ExitCode::FAILURE)
                }
            }
        }
    }
}
