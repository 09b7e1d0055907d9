//! `apdr`: generate synthetic data, train, evaluate, check gradients and
//! inspect attribute masks.
//!
//! Exit codes: 0 on success, 1 when a gradient check fails, 2 for usage
//! errors and unmet preconditions, 3 when training hits a non-finite loss.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use apdr::evaluation::Branch;
use apdr::training::Preset;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use config::{parse_assignment, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "apdr", version, about = "Attribute-guided part detection and refinement for re-identification")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON configuration, e.g. a `config.json` from an earlier run.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set train.stage1_epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, Value)>,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic AttrGrid dataset into the output directory.
    Generate {
        /// Train identities.
        #[arg(long)]
        identities: Option<usize>,
        /// Overwrite an existing dataset in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train stage 1, stage 2 or both, checkpointing every epoch.
    Train {
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the query and gallery splits.
    Eval {
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        /// Checkpoint to score.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
        /// Add k-reciprocal re-ranked scores.
        #[arg(long)]
        rerank: bool,
        #[arg(long, value_parser = parse_branch, conflicts_with = "baseline")]
        branch: Option<Branch>,
        /// Score the global feature alone.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Finite-difference checks of every op and of the whole tiny network.
    Gradcheck {
        /// Check a single op (`end_to_end` for the whole network).
        #[arg(long)]
        op: Option<String>,
    },
    /// Dump learned masks of a few query images and report mask IoU.
    InspectMasks {
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        probes: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Baseline {
    GlobalOnly,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: apdr::Error| e.to_string())
}

fn parse_branch(s: &str) -> Result<Branch, String> {
    s.parse().map_err(|e: apdr::Error| e.to_string())
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl Exit {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<apdr::Error> for Exit {
    fn from(e: apdr::Error) -> Self {
        use apdr::Error::*;
        let code = match e {
            Numerical(_) => 3,
            Config(_) | Input(_) | Load { .. } | Io { .. } | Json(_) => 2,
            Internal(_) => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Exit {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

/// Flags as dotted configuration keys, in the order they override.
fn flag_overrides(cli: &Cli) -> Vec<(String, Value)> {
    let g = &cli.global;
    let mut flags = Vec::new();
    let mut put = |k: &str, v: Value| flags.push((k.to_string(), v));
    if let Some(s) = g.seed {
        put("seed", json!(s));
    }
    if let Some(o) = &g.out {
        put("out", json!(o));
    }
    match &cli.command {
        Command::Generate { identities, .. } => {
            if let Some(n) = identities {
                put("generator.train_identities", json!(n));
            }
        }
        Command::Train {
            dataset,
            preset,
            stage,
            checkpoint,
            ..
        } => {
            dataset.iter().for_each(|d| put("dataset", json!(d)));
            preset.iter().for_each(|p| put("preset", json!(p)));
            stage.iter().for_each(|s| put("stage", json!(s)));
            checkpoint.iter().for_each(|c| put("checkpoint", json!(c)));
        }
        Command::Eval {
            dataset,
            checkpoint,
            preset,
            rerank,
            branch,
            baseline,
        } => {
            dataset.iter().for_each(|d| put("dataset", json!(d)));
            checkpoint.iter().for_each(|c| put("checkpoint", json!(c)));
            preset.iter().for_each(|p| put("preset", json!(p)));
            if *rerank {
                put("eval.rerank", json!(true));
            }
            if let Some(b) = branch {
                put("eval.branch", json!(b));
            }
            if baseline.is_some() {
                put("eval.branch", json!(Branch::Global));
            }
        }
        Command::Gradcheck { op } => {
            op.iter().for_each(|o| put("op", json!(o)));
        }
        Command::InspectMasks {
            dataset,
            checkpoint,
            probes,
        } => {
            dataset.iter().for_each(|d| put("dataset", json!(d)));
            checkpoint.iter().for_each(|c| put("checkpoint", json!(c)));
            probes.iter().for_each(|p| put("probes", json!(p)));
        }
    }
    // `--set` comes last so it can refine anything above.
    flags.extend(g.set.iter().cloned());
    flags
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate { .. } => "generate",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Gradcheck { .. } => "gradcheck",
        Command::InspectMasks { .. } => "inspect-masks",
    }
}

fn run(cli: Cli) -> Result<(), Exit> {
    let name = command_name(&cli.command);
    let cfg = RunConfig::resolve(name, cli.global.config.as_deref(), &flag_overrides(&cli)).map_err(Exit::usage)?;
    match cli.command {
        Command::Generate { force, .. } => commands::generate(&cfg, force),
        Command::Train { resume, .. } => commands::train(&cfg, resume),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Gradcheck { .. } => commands::gradcheck(&cfg),
        Command::InspectMasks { .. } => commands::inspect_masks(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
