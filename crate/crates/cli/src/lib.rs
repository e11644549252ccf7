//! `csl` command-line pipeline: gen, corrupt, train, audit, eval, heatmap.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use csl_core::csl::CslError;
use csl_core::metrics::MetricsError;
use csl_core::model::ModelError;
use csl_core::seqdata::{CorruptionKind, DataError, Split};
use csl_core::trainer::{StoreError, TrainError};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::Numeric(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Numeric { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CslError> for CliError {
    fn from(e: CslError) -> Self {
        match e {
            CslError::Config(_) => CliError::Config(e.to_string()),
            CslError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "csl", version, about = "Find annotation errors in phase-labelled sequences from per-frame loss trajectories")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration; built-in defaults when omitted
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the global seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory that relative paths resolve against
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for auditing
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train, val and test splits from the grammar
    Gen,
    /// Inject annotation errors into one split
    Corrupt(CorruptArgs),
    /// Train a model and write one checkpoint per saved epoch
    Train,
    /// Score every frame of the audit dataset against the checkpoints
    Audit,
    /// Compute EDA and micro-AUC from audit profiles
    Eval,
    /// Write loss-trajectory heatmaps as binary PGM
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CorruptArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<CorruptionKind>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    /// Source dataset; defaults to the split's generated file
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Destination; defaults to `<split>.<kind>.jsonl` in the data directory
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HeatmapArgs {
    /// Video id; every audited video when omitted
    #[arg(long)]
    pub video: Option<String>,
}

fn parse_kind(s: &str) -> Result<CorruptionKind, String> {
    s.parse().map_err(|e: DataError| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: DataError| e.to_string())
}

/// Loads the config and applies command-line overrides.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(o) = &common.out {
        cfg.paths.root = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Gen => commands::cmd_gen(&cfg),
        Command::Corrupt(a) => commands::cmd_corrupt(&cfg, &a),
        Command::Train => commands::cmd_train(&cfg),
        Command::Audit => commands::cmd_audit(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Heatmap(a) => commands::cmd_heatmap(&cfg, &a),
    }
}
