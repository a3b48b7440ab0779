use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtkd_cli::manifest::load_and_resolve;
use mtkd_cli::report::report;
use mtkd_cli::runner::{run_resolved, RunOptions};
use mtkd_cli::{CliError, CliResult};
use mtkd_core::data::{generate, save_dataset, SyntheticSpec};

#[derive(Parser)]
#[command(name = "mtkd", version, about = "Multi-teacher distillation experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every (grid point × seed) run of a manifest.
    Run {
        manifest: PathBuf,
        /// Replace the manifest's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Independent runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Check a manifest and its referenced files, print the effective config.
    Validate { manifest: PathBuf },
    /// Summarize completed runs under a directory.
    Report { dir: PathBuf },
    /// Generate a synthetic dataset file from a spec JSON.
    GenData { spec: PathBuf, out: PathBuf },
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run {
            manifest,
            seed_override,
            threads,
            output_dir,
        } => {
            let resolved = load_and_resolve(&manifest)?;
            let opts = RunOptions {
                seed_override,
                threads,
                output_dir,
            };
            let outcome = run_resolved(resolved, &opts)?;
            let ok = outcome.results.iter().filter(|r| r.metrics.is_ok()).count();
            println!(
                "{ok}/{} runs completed; artifacts in {}",
                outcome.results.len(),
                outcome.output_dir.display()
            );
            match outcome.first_error {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
        Command::Validate { manifest } => {
            let resolved = load_and_resolve(&manifest)?;
            let json = serde_json::to_string_pretty(&resolved.effective()).map_err(|e| CliError::data(e.to_string()))?;
            println!("{json}");
            Ok(())
        }
        Command::Report { dir } => {
            let r = report(&dir)?;
            print!("{}", r.text);
            for p in &r.long_csvs {
                println!("long-format csv: {}", p.display());
            }
            Ok(())
        }
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| CliError::config(format!("{}: {e}", spec.display())))?;
            let spec: SyntheticSpec =
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", spec.display())))?;
            let ds = generate(&spec).map_err(|e| CliError::from_core(e, None))?;
            save_dataset(&ds, &out).map_err(|e| CliError::from_core(e, None))?;
            println!("wrote {} rows to {}", ds.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
