//! `syncnet`: certificate checks, controller synthesis and synchronization
//! experiments driven by a JSON configuration file.
//!
//! Exit codes: 0 ok, 1 usage or parse error, 2 verdict failure, 3 numerical
//! failure. Every failure prints one `syncnet: <reason>: <detail>` line on stderr.

mod commands;
mod config;
mod outcome;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::commands::Context;
use crate::config::Overrides;
use crate::outcome::{append_index, unix_time, write_manifest, Failure, OutcomeRecord, RunManifest, Status};

#[derive(Debug, Parser)]
#[command(name = "syncnet", version, about = "Synchronization controllers for networks of nonlinear agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for manifests, traces and the results index.
    #[arg(long, global = true, value_name = "DIR", default_value = "syncnet-out")]
    out: PathBuf,
    /// Seed for random sample points and perturbations.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Proceed despite failed prerequisites or a gain below the minimum; with a
    /// value, also use that gain.
    #[arg(long, global = true, value_name = "GAIN", num_args = 0..=1)]
    override_gain: Option<Option<f64>>,
    /// Grid points per axis for sampled checks.
    #[arg(long, global = true, value_name = "K")]
    grid: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Laplacian spectra, connectivity and the coupling margin.
    GraphInfo,
    /// Run the certificate checks on the declared box.
    Check,
    /// Build the synchronizing controller and its gain certificate.
    Synthesize,
    /// Augment a strict-feedback certificate and verify it.
    Backstep,
    /// Synthesize, integrate the closed loop, fit the decay rate.
    Simulate,
    /// Repeat the simulation over several perturbation sizes.
    Sweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GraphInfo => "graph-info",
            Command::Check => "check",
            Command::Synthesize => "synthesize",
            Command::Backstep => "backstep",
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
        }
    }
}

fn first_line(text: &str) -> String {
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
    line.trim().trim_start_matches("error: ").to_string()
}

fn run(cli: &Cli, text: &Result<String, Failure>, echo: &mut Value) -> Result<Value, Failure> {
    let text = text.as_ref().map_err(Clone::clone)?;
    let parsed = config::parse(text)?;
    let resolved = config::resolve(&parsed, Overrides { seed: cli.seed, grid: cli.grid })?;
    *echo = resolved.echo.clone();
    let ctx = Context {
        resolved: &resolved,
        out: &cli.out,
        override_checks: cli.override_gain.is_some(),
        override_gain: cli.override_gain.flatten(),
    };
    match cli.command {
        Command::GraphInfo => commands::graph_info(&ctx),
        Command::Check => commands::check(&ctx),
        Command::Synthesize => commands::synthesize(&ctx),
        Command::Backstep => commands::backstep(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Sweep => commands::sweep(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("syncnet: usage: {}", first_line(&e.render().to_string()));
            return ExitCode::from(Status::Usage.code());
        }
    };

    let (text, digest) = match &cli.config {
        None => (Err(Failure::usage("missing-config", "--config <PATH> is required")), String::new()),
        Some(path) => match fs::read(path) {
            Ok(bytes) => {
                let digest = format!("{:x}", Sha256::digest(&bytes));
                let text =
                    String::from_utf8(bytes).map_err(|_| Failure::usage("config-parse", "config is not valid UTF-8"));
                (text, digest)
            }
            Err(e) => (Err(Failure::usage("config-io", format!("{}: {e}", path.display()))), String::new()),
        },
    };

    let mut echo = Value::Null;
    let result = run(&cli, &text, &mut echo);
    let (status, reason, detail, summary) = match &result {
        Ok(summary) => (Status::Ok, None, None, summary.clone()),
        Err(f) => (f.status, Some(f.reason), Some(f.detail.as_str()), f.summary.clone()),
    };
    let manifest = RunManifest {
        command: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        input_sha256: &digest,
        config: &echo,
        outcome: OutcomeRecord { status, exit_code: status.code(), reason, detail, summary: &summary },
        timestamp: unix_time(),
    };
    let written = write_manifest(&cli.out, &manifest).and_then(|()| append_index(&cli.out, &manifest));

    if let Err(f) = &result {
        eprintln!("{}", f.line());
        return ExitCode::from(f.status.code());
    }
    if let Err(e) = written {
        eprintln!("{}", Failure::usage("output-io", format!("{}: {e}", cli.out.display())).line());
        return ExitCode::from(Status::Usage.code());
    }
    ExitCode::SUCCESS
}
