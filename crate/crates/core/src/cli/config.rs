use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::cause::{HeuristicStrategy, PromptConfig, DEFAULT_THRESHOLD};
use crate::corpus::{CorpusFormat, SplitName};
use crate::features::Modality;
use crate::fusion::FusionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionSource {
    /// Gold annotations from the corpus.
    Gold,
    /// A predictions file written by `eval-mer`.
    Predictions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub kind: ClientKind,
    pub stub_fixture: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    /// Runs whose failed-target fraction exceeds this exit with the
    /// client-failure code.
    pub max_failure_rate: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            kind: ClientKind::Stub,
            stub_fixture: None,
            endpoint: None,
            timeout_ms: 30_000,
            max_in_flight: 4,
            max_failure_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub signal: f64,
    pub modalities: Vec<Modality>,
    pub dims: BTreeMap<Modality, usize>,
    /// Give each modality a disjoint subset of visible classes.
    pub complementary: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            signal: 1.0,
            modalities: Modality::ALL.to_vec(),
            dims: Modality::ALL
                .iter()
                .map(|&m| (m, m.default_dim()))
                .collect(),
            complementary: false,
        }
    }
}

/// Everything a run needs. Loaded from a TOML file, then overridden by flags,
/// and written beside the run's outputs as `run_config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub corpus_format: CorpusFormat,
    pub eval_split: SplitName,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub emotion_source: EmotionSource,
    pub heuristic: Option<HeuristicStrategy>,
    pub tau: f64,
    pub windows: Vec<usize>,
    pub worst_k: usize,
    pub features: BTreeMap<Modality, PathBuf>,
    pub fusion: FusionConfig,
    pub prompt: PromptConfig,
    pub client: ClientConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            corpus: None,
            corpus_format: CorpusFormat::CanonicalJson,
            eval_split: SplitName::Test,
            checkpoint: None,
            predictions: None,
            pairs: None,
            emotion_source: EmotionSource::Predictions,
            heuristic: None,
            tau: DEFAULT_THRESHOLD,
            windows: vec![1, 3, 5, 7, 9],
            worst_k: 5,
            features: BTreeMap::new(),
            fusion: FusionConfig::default(),
            prompt: PromptConfig::default(),
            client: ClientConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// TOML for `run_config.toml`. The output directory is recorded as `.`,
    /// i.e. the directory holding the file, so identical runs into different
    /// directories write identical bytes.
    pub fn effective_toml(&self) -> String {
        let mut copy = self.clone();
        copy.output_dir = PathBuf::from(".");
        toml::to_string(&copy).expect("run config serializes to TOML")
    }

    pub fn require_corpus(&self) -> Result<&Path, CliError> {
        self.corpus.as_deref().ok_or_else(|| {
            CliError::Config("no corpus given (set `corpus` or pass --corpus)".into())
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(CliError::Config(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if self.client.max_in_flight == 0 {
            return Err(CliError::Config(
                "client.max_in_flight must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.client.max_failure_rate) {
            return Err(CliError::Config(
                "client.max_failure_rate must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}
