//! Command-line entry point. Everything except the five flags lives in the
//! JSON config file; `pema --help` lists the flags and modes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use pema_core::{parse_config, runner, Error, Mode};

#[derive(Debug, Parser)]
#[command(name = "pema", version, about = "Decentralized dual-adapter learning simulator")]
struct Cli {
    /// JSON config file with flat dotted keys.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// single, topology-sweep, mu-sweep, dropout-compare, rate-scaling or indep-baseline.
    #[arg(long, value_name = "NAME", default_value = "single")]
    mode: String,

    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "pema_out")]
    out: PathBuf,

    /// Overrides the config seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Only log warnings and errors.
    #[arg(long)]
    quiet: bool,
}

fn fail(category: &str, msg: impl std::fmt::Display, code: u8) -> ExitCode {
    let line = msg.to_string().replace('\n', " ");
    eprintln!("error[{category}]: {}", line.trim());
    ExitCode::from(code)
}

fn execute(cli: &Cli) -> Result<serde_json::Value, Error> {
    let mode: Mode = cli.mode.parse()?;
    let mut cfg = parse_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let outcome = runner::run(&cfg, mode, &cli.out)?;
    Ok(outcome.summary().clone())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            _ => {
                let text = e.to_string();
                let msg: Vec<&str> = text
                    .lines()
                    .map(str::trim)
                    .take_while(|l| !l.starts_with("Usage:"))
                    .filter(|l| !l.is_empty())
                    .collect();
                return fail("invalid-config", msg.join(" ").trim_start_matches("error: "), 2);
            }
        },
    };

    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match execute(&cli) {
        Ok(summary) => {
            if !cli.quiet {
                println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.category(), &e, e.exit_code() as u8),
    }
}
