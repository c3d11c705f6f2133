//! Command-line driver. Each subcommand reads a [`RunConfig`] (TOML file plus
//! flag overrides, flags win), does its work, and writes its outputs together
//! with `run_config.toml` into the output directory.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{ClientConfig, ClientKind, EmotionSource, RunConfig, SynthConfig};

use crate::cause::HeuristicStrategy;
use crate::corpus::{CorpusError, CorpusFormat, SplitName};
use crate::features::{FeatureError, Modality};
use crate::fusion::FusionError;

pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const VALIDATION: i32 = 4;
    pub const DIVERGENCE: i32 = 5;
    pub const CLIENT_FAILURES: i32 = 6;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{failures} of {targets} generation requests failed (limit {limit})")]
    ClientFailures {
        failures: usize,
        targets: usize,
        limit: f64,
    },
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> CliError {
        CliError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit_code::CONFIG,
            CliError::Io { .. } => exit_code::IO,
            CliError::Validation(_) => exit_code::VALIDATION,
            CliError::Divergence(_) => exit_code::DIVERGENCE,
            CliError::ClientFailures { .. } => exit_code::CLIENT_FAILURES,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(err: CorpusError) -> Self {
        match err {
            CorpusError::Io { path, source } => CliError::io(&path, source),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(err: FeatureError) -> Self {
        match err {
            FeatureError::Io { path, source } => CliError::io(&path, source),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(err: FusionError) -> Self {
        match err {
            FusionError::Divergence { .. } => CliError::Divergence(err.to_string()),
            FusionError::Io { path, source } => CliError::io(&path, source),
            FusionError::Config(msg) => CliError::Config(msg),
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mer-mce",
    version,
    about = "Multimodal emotion-cause pair extraction pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a corpus; write it in canonical form.
    Ingest(RunArgs),
    /// Generate synthetic per-modality features from gold emotions.
    SynthFeatures(RunArgs),
    /// Train the attention-fusion emotion classifier.
    TrainMer(RunArgs),
    /// Predict emotions with a trained checkpoint.
    EvalMer(RunArgs),
    /// Run prompt, generation, matching and pair assembly.
    ExtractCauses(RunArgs),
    /// Score a pairs file against the corpus gold pairs.
    EvalPairs(RunArgs),
    /// Repeat cause extraction across history-window sizes.
    AblateWindow(RunArgs),
    /// Write a combined metrics and error-analysis report.
    Report(RunArgs),
}

/// Flags shared by every subcommand; each overrides the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// canonical | ecf
    #[arg(long)]
    pub corpus_format: Option<CorpusFormat>,
    /// train | dev | test
    #[arg(long)]
    pub split: Option<SplitName>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feature file per modality, e.g. `--feature text=feats/text.csv`.
    #[arg(long = "feature", value_parser = parse_feature)]
    pub features: Vec<(Modality, PathBuf)>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Use gold emotions instead of predictions for cause extraction.
    #[arg(long)]
    pub gold_emotions: bool,
    /// Replace the generative stage with a rule: self | previous.
    #[arg(long, value_parser = parse_heuristic)]
    pub heuristic: Option<HeuristicStrategy>,
    #[arg(long)]
    pub stub_fixture: Option<PathBuf>,
    /// Base URL of a `/generate` endpoint; selects the HTTP client.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Comma-separated window sizes for ablate-window.
    #[arg(long, value_delimiter = ',')]
    pub windows: Option<Vec<usize>>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub common_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub signal: Option<f64>,
    /// Modalities to synthesize, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<Modality>>,
    /// Synthetic feature width per modality, e.g. `--dim text=64`.
    #[arg(long = "dim", value_parser = parse_dim)]
    pub dims: Vec<(Modality, usize)>,
    #[arg(long)]
    pub complementary: bool,
    #[arg(long)]
    pub worst_k: Option<usize>,
}

fn parse_feature(s: &str) -> Result<(Modality, PathBuf), String> {
    let (m, p) = s.split_once('=').ok_or("expected MODALITY=PATH")?;
    Ok((
        m.parse().map_err(|e: FeatureError| e.to_string())?,
        PathBuf::from(p),
    ))
}

fn parse_dim(s: &str) -> Result<(Modality, usize), String> {
    let (m, d) = s.split_once('=').ok_or("expected MODALITY=DIM")?;
    let dim = d
        .parse()
        .map_err(|_| format!("`{d}` is not a positive integer"))?;
    Ok((m.parse().map_err(|e: FeatureError| e.to_string())?, dim))
}

fn parse_heuristic(s: &str) -> Result<HeuristicStrategy, String> {
    match s {
        "self" => Ok(HeuristicStrategy::SelfCause),
        "previous" => Ok(HeuristicStrategy::Previous),
        other => Err(format!("unknown heuristic `{other}` (self | previous)")),
    }
}

impl RunArgs {
    /// Loads the config file (if any) and applies flag overrides.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr => $($field:tt)+) => {
                if let Some(v) = $flag.clone() {
                    cfg.$($field)+ = v;
                }
            };
        }
        set!(self.output_dir => output_dir);
        set!(self.corpus_format => corpus_format);
        set!(self.split => eval_split);
        set!(self.seed => seed);
        set!(self.tau => tau);
        set!(self.windows => windows);
        set!(self.worst_k => worst_k);
        set!(self.epochs => fusion.epochs);
        set!(self.learning_rate => fusion.learning_rate);
        set!(self.batch_size => fusion.batch_size);
        set!(self.common_dim => fusion.common_dim);
        set!(self.dropout => fusion.dropout_rate);
        set!(self.window => prompt.window);
        set!(self.timeout_ms => client.timeout_ms);
        set!(self.max_in_flight => client.max_in_flight);
        set!(self.signal => synth.signal);
        set!(self.modalities => synth.modalities);
        if self.corpus.is_some() {
            cfg.corpus = self.corpus.clone();
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint.clone();
        }
        if self.predictions.is_some() {
            cfg.predictions = self.predictions.clone();
        }
        if self.pairs.is_some() {
            cfg.pairs = self.pairs.clone();
        }
        if self.heuristic.is_some() {
            cfg.heuristic = self.heuristic;
        }
        if self.stub_fixture.is_some() {
            cfg.client.stub_fixture = self.stub_fixture.clone();
            cfg.client.kind = ClientKind::Stub;
        }
        if self.endpoint.is_some() {
            cfg.client.endpoint = self.endpoint.clone();
            cfg.client.kind = ClientKind::Http;
        }
        if self.gold_emotions {
            cfg.emotion_source = EmotionSource::Gold;
        }
        if self.complementary {
            cfg.synth.complementary = true;
        }
        for (m, p) in &self.features {
            cfg.features.insert(*m, p.clone());
        }
        for (m, d) in &self.dims {
            cfg.synth.dims.insert(*m, *d);
        }
        // The fusion seed follows the run seed.
        cfg.fusion.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses arguments and runs one subcommand.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    commands::dispatch(&cli.command)
}

/// Entry point for the binary: runs and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit_code::CONFIG
            } else {
                exit_code::SUCCESS
            };
        }
    };
    match commands::dispatch(&cli.command) {
        Ok(()) => exit_code::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
