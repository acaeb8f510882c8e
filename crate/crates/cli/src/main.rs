//! `cstyle`: runs the three-phase pipeline, ablations and scheme
//! comparisons, and inspects the artifacts they leave behind.
//!
//! Exit codes: 0 success, 1 runtime error, 2 configuration error,
//! 3 corrupt or unreadable artifact.

mod inspect;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cstyle_core::pipeline::{
    ablate, compare_schemes, run_all, run_dir, write_phase1, write_phase2, write_phase3, ExperimentReport,
    Phase3Inputs, Session,
};
use cstyle_core::{Error, MetricsReport, RunConfig};

#[derive(Parser)]
#[command(
    name = "cstyle",
    version,
    about = "Style-aligned, subject-consistent batch generation on a toy denoiser"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (`key = value` lines under `[section]` headers).
    #[arg(long)]
    config: PathBuf,
    /// Root of the output tree; runs land in `<out>/<run-id>/`.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override one configuration key, e.g. `--set steps=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// All three phases.
    Run(RunArgs),
    /// Vanilla pass; writes the value store and style reference.
    Phase1(RunArgs),
    /// Crossing-only pass; writes subject masks and correspondences.
    Phase2(RunArgs),
    /// Final pass from the artifacts of phases 1 and 2.
    Phase3(RunArgs),
    /// Base run plus six single-component ablations.
    Ablate(RunArgs),
    /// Every intervention scheme on shared seeds.
    CompareSchemes(RunArgs),
    /// Describe a value store, run directory, manifest, mask, map or tensor file.
    Inspect { path: PathBuf },
}

fn exit_code(err: &Error) -> u8 {
    if err.is_config() {
        2
    } else if err.is_corruption() {
        3
    } else {
        1
    }
}

fn print_metrics(report: &MetricsReport) {
    print!("{}", report.to_tsv());
}

fn print_experiment(report: &ExperimentReport, label: &str) {
    println!("{}", report.dir.display());
    print!("{}", report.to_tsv(label));
}

fn session(args: &RunArgs) -> Result<(Session, PathBuf), Error> {
    let config = RunConfig::load(&args.config, &args.overrides)?;
    let dir = run_dir(&config, &args.out);
    Ok((Session::new(config)?, dir))
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Run(args) => {
            let config = RunConfig::load(&args.config, &args.overrides)?;
            let artifacts = run_all(&config, &args.out)?;
            println!("{}", artifacts.dir.display());
            print_metrics(&artifacts.phase3.metrics);
        }
        Command::Phase1(args) => {
            let (session, dir) = session(&args)?;
            let out = write_phase1(&session, &dir)?;
            println!("{}", dir.display());
            println!(
                "stored {} value tensors, window {}",
                out.store.len(),
                out.store.window()
            );
        }
        Command::Phase2(args) => {
            let (session, dir) = session(&args)?;
            let out = write_phase2(&session, &dir)?;
            println!("{}", dir.display());
            for m in &out.masks {
                println!("image {}: {} subject patches", m.image_index(), m.len());
            }
        }
        Command::Phase3(args) => {
            let (session, dir) = session(&args)?;
            let inputs = Phase3Inputs::load(&dir, session.config().batch_size)?;
            let out = write_phase3(&session, &inputs, &dir, "", "phase3")?;
            println!("{}", dir.display());
            print_metrics(&out.metrics);
        }
        Command::Ablate(args) => {
            let config = RunConfig::load(&args.config, &args.overrides)?;
            print_experiment(&ablate(&config, &args.out)?, "variant");
        }
        Command::CompareSchemes(args) => {
            let config = RunConfig::load(&args.config, &args.overrides)?;
            print_experiment(&compare_schemes(&config, &args.out)?, "scheme");
        }
        Command::Inspect { path } => inspect_or_corrupt(&path)?,
    }
    Ok(())
}

/// Any failure to read an artifact counts as corruption.
fn inspect_or_corrupt(path: &Path) -> Result<(), Error> {
    let text = inspect::describe(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Corrupt {
            path,
            offset: 0,
            reason: format!("unreadable: {source}"),
        },
        other => other,
    })?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
