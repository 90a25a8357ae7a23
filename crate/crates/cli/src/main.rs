//! Command-line front end: run experiment configs or named presets,
//! check relation informativeness, and dump plot-ready curves.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use relkit_cli::config::ExperimentConfig;
use relkit_cli::emit::write_all;
use relkit_cli::plot::{plot_csv, plot_points};
use relkit_cli::presets::{preset, preset_names, preset_toml};
use relkit_cli::runner::{relation_diagnostics, run_experiment, RunOutput};
use relkit_cli::{HarnessError, Result};

#[derive(Parser)]
#[command(
    name = "relkit",
    about = "Relation-aware regression and treatment-effect benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config and write result tables
    Run {
        /// Path to the experiment config
        config: PathBuf,
        /// Output directory (default: the config's out_dir, else runs/run)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named preset, or print its config with --print
    Preset {
        /// One of the built-in preset names
        name: String,
        /// Override the seed list with seeds 0..N
        #[arg(long)]
        seeds: Option<usize>,
        /// Output directory (default: runs/<name>)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the preset's TOML instead of running it
        #[arg(long)]
        print: bool,
        /// List available preset names and exit
        #[arg(long)]
        list: bool,
    },
    /// Test whether related pairs have more similar targets than
    /// unrelated pairs (two-sample Kolmogorov-Smirnov)
    DiagnoseRel {
        /// Path to the experiment config
        config: PathBuf,
    },
    /// Emit per-cluster prediction curves on a dense x grid as CSV
    Plotdata {
        /// Path to the experiment config
        config: PathBuf,
        /// Write CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn report(output: &RunOutput, dir: &std::path::Path) -> Result<()> {
    for w in &output.warnings {
        eprintln!("warning: {w}");
    }
    let written = write_all(dir, output)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    let wall_ms: u64 = output.rows.iter().map(|r| r.wall_ms_total).sum();
    println!(
        "{} result rows from {} fits ({:.1}s fit time)",
        output.rows.len(),
        output.seed_records.len(),
        wall_ms as f64 / 1e3
    );
    Ok(())
}

fn override_seeds(cfg: &mut ExperimentConfig, seeds: Option<usize>) -> Result<()> {
    if let Some(n) = seeds {
        if n == 0 {
            return Err(HarnessError::Config("--seeds must be at least 1".into()));
        }
        cfg.seeds = (0..n as u64).collect();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::from_toml_file(&config)?;
            let dir = out
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs/run"));
            report(&run_experiment(&cfg)?, &dir)
        }
        Command::Preset {
            name,
            seeds,
            out,
            print,
            list,
        } => {
            if list {
                for n in preset_names() {
                    println!("{n}");
                }
                return Ok(());
            }
            let mut cfg = preset(&name)?;
            override_seeds(&mut cfg, seeds)?;
            if print {
                if seeds.is_some() {
                    print!("{}", cfg.to_toml_string()?);
                } else {
                    print!("{}", preset_toml(&name)?);
                }
                return Ok(());
            }
            let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&name));
            report(&run_experiment(&cfg)?, &dir)
        }
        Command::DiagnoseRel { config } => {
            let cfg = ExperimentConfig::from_toml_file(&config)?;
            for diag in relation_diagnostics(&cfg)? {
                println!("{}", serde_json::to_string(&diag)?);
            }
            Ok(())
        }
        Command::Plotdata { config, out } => {
            let cfg = ExperimentConfig::from_toml_file(&config)?;
            let text = plot_csv(&plot_points(&cfg)?);
            match out {
                Some(path) => {
                    if let Some(parent) = path.parent() {
                        std::fs::create_dir_all(parent)?;
                    }
                    std::fs::write(&path, text)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
