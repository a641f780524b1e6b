//! `fastsearch`: profile, search, derive, train and report from the command line.
//!
//! Settings resolve in three layers, later ones winning: the built-in preset named
//! by `--preset` (default `desk`), a preset JSON file given with `--config` (replaces
//! the built-in preset as a whole), then individual flags such as `--seed` or `--epochs`.
//! `derive` and `report` read the preset stored in the run directory instead.

mod commands;
mod manifest;
mod run;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fastsearch_core::genotype::BranchSelectConfig;
use fastsearch_core::search::RegularizerMode;
use serde_json::json;

use crate::run::{load_run_preset, resolve_preset, Run};

#[derive(Debug, Parser)]
#[command(name = "fastsearch", version, about = "Latency-aware multi-resolution architecture search")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Built-in preset: `desk` (minutes on one core) or `full` (the reference-scale space).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Preset JSON file replacing the built-in preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for weight init, sampling and data order (the task data keep the preset seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: runs/<command>, or <run>/<command> for derive and report].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Naive,
    Decoupled,
}

impl From<Mode> for RegularizerMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Naive => RegularizerMode::Naive,
            Mode::Decoupled => RegularizerMode::Decoupled,
        }
    }
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Latency regularizer weighting.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Search epochs. With 0, pretraining is skipped too unless --pretrain-epochs is given.
    #[arg(long)]
    epochs: Option<usize>,
    /// Weight-only pretraining epochs before the search.
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Latency table CSV to use instead of the preset's synthetic cost model.
    #[arg(long)]
    lut: Option<PathBuf>,
}

fn parse_deltas(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"))).collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected three comma-separated values, got {}", v.len()))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Latency table, per-family sensitivity and the solved regularizer weights.
    Profile {
        /// Use these operator, rate and ratio latency gaps instead of probing the table.
        #[arg(long, value_parser = parse_deltas, value_name = "O,S,CHI")]
        deltas: Option<[f64; 3]>,
        #[arg(long)]
        lut: Option<PathBuf>,
    },
    /// Pretraining and architecture search with a latency penalty.
    Search(SearchArgs),
    /// Joint search of a full-width teacher and a latency-constrained student.
    Cosearch(SearchArgs),
    /// Genotypes for every rate pair of a finished search run, ranked by the latency-weighted target.
    Derive {
        /// Search or cosearch output directory.
        #[arg(long)]
        run: PathBuf,
        /// Which architecture of a cosearch run to derive.
        #[arg(long, value_parser = ["arch", "teacher", "student"])]
        arch: Option<String>,
        /// Latency budget of the target in milliseconds.
        #[arg(long)]
        target_ms: Option<f64>,
    },
    /// Train a derived genotype from scratch, optionally distilling from a teacher.
    Train {
        #[arg(long)]
        genotype: PathBuf,
        /// Teacher genotype JSON (trained first) or a finished train directory (weights reused).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Student training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lut: Option<PathBuf>,
    },
    /// SVG trajectory plot, SVG architecture diagram and summary of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Profile { .. } => "profile",
            Command::Search(_) => "search",
            Command::Cosearch(_) => "cosearch",
            Command::Derive { .. } => "derive",
            Command::Train { .. } => "train",
            Command::Report { .. } => "report",
        }
    }

    fn run_dir(&self) -> Option<&Path> {
        match self {
            Command::Derive { run, .. } | Command::Report { run } => Some(run),
            _ => None,
        }
    }
}

fn apply_search_flags(p: &mut fastsearch_core::preset::Preset, a: &SearchArgs) {
    if let Some(m) = a.mode {
        p.search.mode = m.into();
    }
    if let Some(e) = a.epochs {
        p.search.search_epochs = e;
        if e == 0 {
            p.search.pretrain_epochs = 0;
        }
    }
    if let Some(e) = a.pretrain_epochs {
        p.search.pretrain_epochs = e;
    }
}

fn execute(cli: Cli) -> Result<()> {
    let name = cli.command.name();
    let c = &cli.common;
    let (preset_name, mut preset, config_path) = match cli.command.run_dir() {
        Some(dir) => {
            if c.preset.is_some() || c.config.is_some() {
                bail!(fastsearch_core::Error::InvalidConfig(format!(
                    "{name} uses the preset stored in the run directory; drop --preset/--config"
                )));
            }
            ("run".to_string(), load_run_preset(dir)?, Some(dir.join(run::PRESET_FILE)))
        }
        None => {
            let (n, p) = resolve_preset(c.preset.as_deref(), c.config.as_deref())?;
            (n, p, c.config.clone())
        }
    };
    if let Some(seed) = c.seed {
        preset.search.seed = seed;
        preset.train.seed = seed;
    }
    match &cli.command {
        Command::Search(a) | Command::Cosearch(a) => apply_search_flags(&mut preset, a),
        Command::Train { epochs: Some(e), .. } => preset.train.epochs = *e,
        _ => {}
    }
    preset.validate()?;
    let out = match (&c.out, cli.command.run_dir()) {
        (Some(o), _) => o.clone(),
        (None, Some(dir)) => dir.join(name),
        (None, None) => PathBuf::from("runs").join(name),
    };

    let mut run = Run::start(name, preset_name, config_path, preset, out)?;
    let result = match &cli.command {
        Command::Profile { deltas, lut } => commands::profile(&mut run, *deltas, lut.as_deref()),
        Command::Search(a) => commands::search_run(&mut run, false, a.lut.as_deref()),
        Command::Cosearch(a) => commands::search_run(&mut run, true, a.lut.as_deref()),
        Command::Derive { run: dir, arch, target_ms } => {
            let mut select = BranchSelectConfig::default();
            if let Some(t) = target_ms {
                select.target_ms = *t;
            }
            commands::derive(&mut run, dir, arch.as_deref(), select)
        }
        Command::Train { genotype, teacher, lut, .. } => commands::train(&mut run, genotype, teacher.as_deref(), lut.as_deref()),
        Command::Report { run: dir } => commands::report(&mut run, dir),
    };
    match result {
        Ok(()) => {
            let m = run.finish("ok")?;
            println!("{}", serde_json::to_string(&json!({ "status": "ok", "out_dir": m.out_dir, "artifacts": m.artifacts.len() }))?);
            Ok(())
        }
        Err(e) => {
            let _ = run.finish("failed");
            Err(e)
        }
    }
}

/// Variant name of the first library error in the chain, else `error`.
fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain().find_map(|c| c.downcast_ref::<fastsearch_core::Error>()).map(|e| e.kind()).unwrap_or("error")
}

fn error_json(kind: &str, e: &anyhow::Error) -> String {
    let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
    json!({ "status": "error", "kind": kind, "message": format!("{e:#}"), "chain": chain }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = anyhow::anyhow!(e.render().to_string().trim().to_string());
            eprintln!("{}", error_json("usage", &err));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(error_kind(&e), &e));
            ExitCode::FAILURE
        }
    }
}
