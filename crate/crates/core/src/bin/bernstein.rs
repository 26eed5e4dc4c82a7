use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bernstein::acceptance;
use bernstein::experiment::{resolve_output_dir, run_experiment, ExperimentConfig, ExperimentKind, OUT_DIR_ENV};

#[derive(Parser)]
#[command(version, about = "Stopping-time Bernstein processes: solvers, simulators and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the environment and the config).
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
        /// Seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the acceptance suite.
    Check {
        /// Only these criteria (1-10).
        #[arg(long = "criterion", value_name = "N")]
        criteria: Vec<u8>,
    },
    /// Print a complete config for an experiment.
    PrintConfig { experiment: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> bernstein::Result<bool> {
    match command {
        Command::Run { config, out, seed } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = resolve_output_dir(out.as_deref(), &cfg);
            cfg.output_dir = Some(dir.clone());
            let manifest = run_experiment(&cfg, &dir)?;
            for c in &manifest.checks {
                let tag = if c.pass { "PASS" } else { "FAIL" };
                println!("[{tag}] {}: {:.3e} (threshold {:.3e})", c.name, c.value, c.threshold);
            }
            println!("{} files written to {}", manifest.files.len() + 1, dir.display());
            Ok(manifest.all_passed)
        }
        Command::Check { criteria } => {
            let ids: Vec<u8> = if criteria.is_empty() {
                acceptance::CRITERIA.iter().map(|(id, _)| *id).collect()
            } else {
                criteria
            };
            let mut ok = true;
            for id in ids {
                let r = acceptance::run_criterion(id);
                println!("{r}");
                ok &= r.pass;
            }
            Ok(ok)
        }
        Command::PrintConfig { experiment } => {
            let kind: ExperimentKind = experiment.parse()?;
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::template(kind))?);
            Ok(true)
        }
    }
}
