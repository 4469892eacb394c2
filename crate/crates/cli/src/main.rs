use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qpkam_cli::{cmd_hill, cmd_reduce, cmd_sweep, cmd_verify, Overrides, ProblemConfig, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "qpkam", version, about = "Reduce quasi-periodic linear Hamiltonian systems to constant coefficients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Problem configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory for reports.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for parallel sweeps.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Seed for the randomized invariant checks.
    #[arg(long, global = true, value_name = "S")]
    seed: Option<u64>,
    /// Oracle integration horizon.
    #[arg(long, global = true, value_name = "T")]
    horizon: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Reduce at a single ε and compare with the integrated flow.
    Reduce,
    /// Sweep an ε grid and report failure clusters.
    Sweep,
    /// Hill's-equation verdicts, b(ε) fit and frequency analysis.
    Hill,
    /// Run the named invariant suite.
    Verify,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(path) = &cli.config else {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        eprintln!("error: --config PATH is required\n\n{}", cmd.render_usage());
        return ExitCode::from(EXIT_USAGE as u8);
    };
    if matches!(cli.horizon, Some(t) if !(t > 0.0 && t.is_finite())) {
        eprintln!("error: --horizon must be positive");
        return ExitCode::from(EXIT_USAGE as u8);
    }
    let workers = match cli.workers {
        Some(0) => {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_USAGE as u8);
        }
        Some(n) => n,
        None => 1,
    };
    let cfg = match ProblemConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let ov = Overrides { out: cli.out, seed: cli.seed, horizon: cli.horizon };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().expect("thread pool");
    let result = pool.install(|| match cli.command {
        Command::Reduce => cmd_reduce(&cfg, &ov),
        Command::Sweep => cmd_sweep(&cfg, &ov),
        Command::Hill => cmd_hill(&cfg, &ov),
        Command::Verify => cmd_verify(&cfg, &ov),
    });
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
