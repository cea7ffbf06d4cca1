//! Command-line front end over `leaklab::harness`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use leaklab::config::{self, ExperimentConfig};
use leaklab::data::{self, FileFormat};
use leaklab::harness::{self, Stage};
use leaklab::Result;

#[derive(Parser)]
#[command(
    name = "leaklab",
    version,
    about = "Gradient leakage experiments on simulated federated learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML). `GL_A__B=v` environment variables override key `a.b`.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Last stage to run (`run` only).
    #[arg(long, global = true, value_name = "NAME")]
    stage: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest the target and auxiliary datasets.
    SynthData,
    /// Run the pipeline through poisoning.
    Poison,
    /// Run the whole pipeline, or up to `--stage`.
    Run,
    /// Attack the persisted captures of a run.
    Attack,
    /// Detection metrics on the persisted captures of a run.
    Detect,
    /// λ profiles of the persisted captures of a run.
    Lambda,
    /// Vulnerability/accuracy grid around a persisted poisoned model.
    Landscape,
    /// Re-emit report.csv and report.jsonl from report.json.
    Report,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| leaklab::Error::Invalid("--config PATH is required".into()))?;
    let mut config = config::load_config(path)?;
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    config.validate()?;
    config.check_output_dir()?;
    Ok(config)
}

fn print_rows(stage: Stage, rows: usize, config: &ExperimentConfig) {
    let dir = harness::run_dir(config);
    println!(
        "{}: {rows} rows -> {}",
        stage.name(),
        dir.join(format!("{}.csv", stage.name())).display()
    );
}

fn execute(cli: &Cli) -> Result<()> {
    match cli.command {
        Command::Report => {
            let dir = match (&cli.config, &cli.out) {
                (Some(_), _) => harness::run_dir(&load(cli)?),
                (None, Some(out)) => out.clone(),
                (None, None) => {
                    return Err(leaklab::Error::Invalid(
                        "report needs --config or --out".into(),
                    ))
                }
            };
            for p in harness::reemit_report(&dir)? {
                println!("{}", p.display());
            }
        }
        Command::SynthData => {
            let config = load(cli)?;
            let (target, aux) = harness::build_datasets(&config)?;
            let dir = harness::run_dir(&config).join("data");
            data::write_dataset(&target, &dir.join("target.csv"), FileFormat::Csv)?;
            data::write_dataset(&aux, &dir.join("aux.csv"), FileFormat::Csv)?;
            println!(
                "{} target and {} auxiliary samples -> {}",
                target.len(),
                aux.len(),
                dir.display()
            );
        }
        Command::Poison | Command::Run => {
            let config = load(cli)?;
            let last = match (&cli.command, &cli.stage) {
                (Command::Poison, _) => Stage::Poison,
                (_, Some(name)) => name.parse()?,
                _ => Stage::Report,
            };
            let (report, _) = harness::run_stages(&config, last)?;
            println!(
                "{}: {} rows, stages [{}] -> {}",
                report.run_id,
                report.rows.len(),
                report.completed.join(", "),
                harness::run_dir(&config).display()
            );
            for f in &report.failures {
                eprintln!("stage {} failed: {}", f.stage, f.message);
            }
            if !report.failures.is_empty() {
                return Err(leaklab::Error::Stage {
                    stage: report.failures[0].stage.clone(),
                    message: "see report.json".into(),
                });
            }
        }
        Command::Attack | Command::Detect | Command::Lambda | Command::Landscape => {
            let config = load(cli)?;
            let stage = match cli.command {
                Command::Attack => Stage::Attack,
                Command::Detect => Stage::Detect,
                Command::Lambda => Stage::Lambda,
                _ => Stage::Landscape,
            };
            let rows = harness::rerun_stage(&config, stage)?;
            if stage == Stage::Landscape {
                println!(
                    "landscape -> {}",
                    harness::run_dir(&config)
                        .join("landscape/grid.csv")
                        .display()
                );
            } else {
                print_rows(stage, rows.len(), &config);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
