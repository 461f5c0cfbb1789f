use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use contmon_cli::config::parse_config;
use contmon_cli::presets::{load_preset, PRESETS};
use contmon_cli::runner::{rerun, run_to_dir, RunError, RunOptions, MANIFEST_FILE};
use contmon_cli::ScenarioConfig;

#[derive(Parser)]
#[command(
    name = "contmon",
    version,
    about = "Quantum trajectories, feedback and Gaussian control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunFlags {
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "contmon_out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run a JSON scenario file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run a named preset, optionally with dotted `key=value` overrides.
    Preset {
        name: String,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Print the resolved configuration instead of running.
        #[arg(long)]
        print: bool,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Check a scenario file and list every violation.
    Validate {
        config: PathBuf,
    },
    ListPresets,
    /// Re-execute a manifest and verify the output hashes.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value = "contmon_rerun")]
        out: PathBuf,
    },
}

fn read_config(path: &PathBuf) -> Result<ScenarioConfig, RunError> {
    let text = std::fs::read_to_string(path).map_err(|source| RunError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(parse_config(&text)?)
}

fn run(mut config: ScenarioConfig, flags: RunFlags) -> Result<(), RunError> {
    if let Some(seed) = flags.seed {
        config.run.seed = seed;
    }
    let manifest = run_to_dir(
        &config,
        &RunOptions {
            threads: flags.threads,
        },
        &flags.out,
    )?;
    println!(
        "wrote {} file(s) to {} in {:.2}s",
        manifest.outputs.len() + 1,
        flags.out.display(),
        manifest.wall_time_s
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run { config, flags } => run(read_config(&config)?, flags),
        Command::Preset {
            name,
            overrides,
            print,
            flags,
        } => {
            let config = load_preset(&name, &overrides)?;
            if print {
                println!("{}", contmon_cli::to_json(&config));
                Ok(())
            } else {
                run(config, flags)
            }
        }
        Command::Validate { config } => {
            read_config(&config)?;
            println!("{}: ok", config.display());
            Ok(())
        }
        Command::ListPresets => {
            for p in PRESETS {
                println!("{:<26} {}", p.name, p.summary);
            }
            Ok(())
        }
        Command::Rerun {
            manifest,
            threads,
            out,
        } => {
            let path = if manifest.is_dir() {
                manifest.join(MANIFEST_FILE)
            } else {
                manifest
            };
            rerun(&path, &RunOptions { threads }, &out)?;
            println!("rerun matches {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
