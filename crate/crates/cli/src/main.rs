use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qkd_cli::commands::{self, EXIT_ERROR};
use qkd_cli::config::{parse, RunConfig};

/// Finite-key secret-key rates with certified dual SDP bounds.
#[derive(Parser)]
#[command(name = "qkdkeyrate", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Key rate at one distance (exit 2 on zero key).
    Keyrate(Common),
    /// Key rate over the configured distance grid, written as CSV.
    Sweep(Common),
    /// Monte Carlo coverage suites and certificate re-verification.
    Validate(Common),
    /// Export and re-verify the certificates of every SDP in the run.
    Certify(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (dotted keys or JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    distance: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

fn load(c: &Common, sweep_grid: bool) -> anyhow::Result<qkd_cli::config::Resolved> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.run.seed = s;
    }
    if let Some(t) = c.threads {
        cfg.run.threads = t;
    }
    if let Some(d) = c.distance {
        cfg.run.distance_km = d;
        if sweep_grid {
            cfg.sweep.distances = Some(vec![d]);
        }
    }
    if let Some(o) = &c.out {
        cfg.output.path = Some(o.to_string_lossy().into_owned());
    }
    Ok(cfg.resolve()?)
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match &cli.cmd {
        Cmd::Keyrate(c) => commands::keyrate(&load(c, false)?),
        Cmd::Sweep(c) => commands::sweep_cmd(&load(c, true)?),
        Cmd::Validate(c) => commands::validate(&load(c, false)?),
        Cmd::Certify(c) => commands::certify(&load(c, false)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
