use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use stablab::harness::{
    exit_code_for_error, summary_line, write_report, Command, ExperimentConfig, OutputFormat, EXIT_CONFIG,
};

#[derive(Parser)]
#[command(name = "stablab", version, about = "Stability experiments for Jordan *-homomorphisms on matrix algebras")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay the additivity derivation and the three-term inequalities.
    LemmaCheck(Args),
    /// Stabilize a perturbed map and certify the distance bound.
    Stability(Args),
    /// Fit the decay of the Jordan defect under rescaling.
    Superstability(Args),
    /// Compare closed-form and series error bounds over a grid.
    BoundsTable(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => code(EXIT_CONFIG),
            };
        }
    };
    let (command, args) = match cli.command {
        Cmd::LemmaCheck(a) => (Command::LemmaCheck, a),
        Cmd::Stability(a) => (Command::Stability, a),
        Cmd::Superstability(a) => (Command::Superstability, a),
        Cmd::BoundsTable(a) => (Command::BoundsTable, a),
    };

    let mut cfg = match ExperimentConfig::from_path(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("stablab: {e}");
            return code(EXIT_CONFIG);
        }
    };
    if let Some(seed) = args.seed {
        cfg.sampling.seed = seed;
    }
    if let Some(f) = args.format {
        cfg.outputs.format = match f {
            Format::Json => OutputFormat::Json,
            Format::Csv => OutputFormat::Csv,
        };
    }
    if let Some(out) = args.out {
        cfg.outputs.path = Some(out);
    }

    let summary = match command.run(&cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("stablab: {e}");
            return code(exit_code_for_error(&e));
        }
    };
    match write_report(&summary, cfg.outputs.format, cfg.outputs.path.as_deref()) {
        Ok(Some(bytes)) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(&bytes).and_then(|_| stdout.flush()).is_err() {
                return code(EXIT_CONFIG);
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("stablab: {e}");
            return code(EXIT_CONFIG);
        }
    }
    eprintln!("{}", summary_line(&summary));
    code(summary.exit_code())
}
