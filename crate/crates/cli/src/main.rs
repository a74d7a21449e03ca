//! `trun`: operator surface for the desk-scale TransResU-Net.
//!
//! Exit codes are stable API: 0 success, 1 configuration error, 2 data
//! error, 3 numerical abort, 4 per-file inference failures, 5 gradient
//! checks above tolerance. Every failure prints a single machine-parseable
//! `error: <class>: <reason>` line on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trun_cli::{commands, runconfig};
use trun_core::error::Error;

use runconfig::RunConfig;

#[derive(Parser)]
#[command(
    name = "trun",
    about = "Desk-scale TransResU-Net: train, evaluate, infer, bench, gradient-check, synth",
    version
)]
struct Cli {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides train.seed (and the synth default seed)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Graph element precision
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,

    /// Output directory (overrides out.dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train per the configuration; writes checkpoint, history and evaluation
    Train,
    /// Render the metrics table for a checkpoint over a dataset
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Score the dataset's masks against themselves (sanity row)
        #[arg(long)]
        oracle: bool,
    },
    /// Segment images; writes one mask PGM (and optional heatmap PPM) each
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write a decoder-stage activation heatmap per image
        #[arg(long)]
        heatmap: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Measure single-image forward FPS (random weights without --checkpoint)
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
    /// Finite-difference gradient checks (64-bit mode)
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = ["primitive", "block", "model", "all"])]
        scope: String,
    },
    /// Generate a synthetic PPM/PGM dataset with a manifest
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
        outdir: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn error_class(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 1),
        Error::Shape(_) => ("config", 1),
        Error::Io { .. } | Error::Format { .. } | Error::Data(_) | Error::Checkpoint(_) => {
            ("data", 2)
        }
        Error::Numerical(_) => ("numerical", 3),
    }
}

fn resolve_config(cli: &Cli) -> trun_core::Result<RunConfig> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Some(seed) = cli.seed {
        overrides.push(("train.seed".into(), seed.to_string()));
        overrides.push(("data.synth_seed".into(), seed.to_string()));
    }
    if let Some(p) = &cli.precision {
        overrides.push(("precision".into(), p.clone()));
    }
    if let Some(out) = &cli.out {
        overrides.push(("out.dir".into(), out.display().to_string()));
    }
    RunConfig::resolve(cli.config.as_deref(), std::env::vars(), &overrides)
}

fn run(cli: &Cli) -> trun_core::Result<u8> {
    let cfg = resolve_config(cli)?;
    match &cli.cmd {
        Cmd::Train => {
            commands::train::run(&cfg)?;
            Ok(0)
        }
        Cmd::Eval {
            checkpoint,
            format,
            oracle,
        } => {
            let format = commands::eval::parse_format(format)?;
            commands::eval::run(&cfg, checkpoint.as_deref(), format, *oracle)?;
            Ok(0)
        }
        Cmd::Infer {
            checkpoint,
            heatmap,
            images,
        } => {
            let failures = commands::infer::run(&cfg, checkpoint, images, *heatmap)?;
            Ok(if failures > 0 { 4 } else { 0 })
        }
        Cmd::Bench {
            checkpoint,
            frames,
            warmup,
        } => {
            commands::bench::run(&cfg, checkpoint.as_deref(), *warmup, *frames)?;
            Ok(0)
        }
        Cmd::Gradcheck { scope } => {
            let failures = commands::gradcheck::run(&cfg, scope, cfg.train.seed)?;
            if failures.is_empty() {
                Ok(0)
            } else {
                let names: Vec<&str> = failures.iter().map(|f| f.name.as_str()).collect();
                eprintln!(
                    "error: gradcheck: {} check(s) above tolerance: {}",
                    failures.len(),
                    names.join(", ")
                );
                Ok(5)
            }
        }
        Cmd::Synth {
            n,
            size,
            seed,
            outdir,
            force,
        } => {
            let seed = seed.or(cli.seed).unwrap_or(cfg.synth_seed);
            commands::synth::run(*n, *size, seed, outdir, *force)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let (class, code) = error_class(&e);
            // single-line, machine-parseable failure reason
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {class}: {msg}");
            ExitCode::from(code)
        }
    }
}
