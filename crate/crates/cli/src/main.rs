//! `fedtype` command-line runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedtype::config::RunConfig;
use fedtype::Error;

#[derive(Parser, Debug)]
#[command(name = "fedtype", version, about = "Federated training with heterogeneous private models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment and write metrics.csv, summary.json and checkpoints.
    Run {
        config: PathBuf,
        /// Override the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train up to this many sampled clients concurrently.
        #[arg(long, default_value_t = 1)]
        parallel_clients: usize,
    },
    /// Check a config file and list every invalid field.
    Validate { config: PathBuf },
}

const EXIT_INVALID: u8 = 1;
const EXIT_UNREADABLE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn load(path: &PathBuf) -> Result<RunConfig, ExitCode> {
    RunConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        match e {
            Error::ConfigParse(_) => ExitCode::from(EXIT_INVALID),
            _ => ExitCode::from(EXIT_UNREADABLE),
        }
    })
}

fn report_invalid(cfg: &RunConfig) -> bool {
    let report = cfg.validate();
    for f in &report.errors {
        eprintln!("invalid {}: {}", f.field, f.reason);
    }
    !report.is_empty()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDTYPE_LOG", "warn")).init();
    let cli = Cli::parse();

    match cli.command {
        Command::Validate { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if report_invalid(&cfg) {
                return ExitCode::from(EXIT_INVALID);
            }
            println!("{}: ok", config.display());
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            seed,
            out,
            parallel_clients,
        } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if report_invalid(&cfg) {
                return ExitCode::from(EXIT_INVALID);
            }
            match fedtype::runner::run(&cfg, parallel_clients) {
                Ok(summaries) => {
                    for s in summaries {
                        if let Some(m) = s.final_round {
                            println!(
                                "{}: round {} global {:.4} proxy {:.4} private {:.4} eta {:.3}",
                                s.mode, m.round, m.global_acc, m.proxy_acc, m.private_acc, m.mean_eta
                            );
                        }
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
    }
}
