use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pseudopde_cli::config::Phase;
use pseudopde_cli::run::load_config;
use pseudopde_cli::{check, run, RunOptions, EXIT_ERROR, EXIT_OK};

#[derive(Parser)]
#[command(name = "pseudopde", about = "Monte-Carlo solvers for semilinear pseudo-PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured phases and write artifacts.
    Run {
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Master seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated phases, overriding the config.
        #[arg(long, value_delimiter = ',', value_parser = parse_phase)]
        phases: Option<Vec<Phase>>,
    },
    /// Check a config and print it with defaults filled in.
    Validate { config: PathBuf },
    /// Print the version.
    Version,
}

fn parse_phase(text: &str) -> Result<Phase, String> {
    Phase::parse(text).ok_or_else(|| format!("unknown phase '{text}' (simulate, mild, fbsde, crosscheck, operators)"))
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return exit(if e.use_stderr() { EXIT_ERROR } else { EXIT_OK });
        }
    };
    match cli.command {
        Command::Version => {
            println!("pseudopde {}", env!("CARGO_PKG_VERSION"));
            exit(EXIT_OK)
        }
        Command::Validate { config } => {
            let parsed = load_config(&config, None, None).and_then(|c| check(&c).map(|_| c).map_err(|e| e.0));
            match parsed {
                Ok(c) => {
                    println!("{}", serde_json::to_string_pretty(&c).expect("config serializes"));
                    exit(EXIT_OK)
                }
                Err(errors) => {
                    for e in errors {
                        eprintln!("error: {e}");
                    }
                    exit(EXIT_ERROR)
                }
            }
        }
        Command::Run {
            config,
            out,
            threads,
            seed,
            phases,
        } => {
            let outcome = run(&RunOptions {
                config,
                out,
                threads,
                seed,
                phases,
            });
            exit(outcome.exit_code)
        }
    }
}
