//! Per-modality utterance feature tables.
//!
//! Interchange format (one file per modality, UTF-8):
//!
//! ```text
//! text,4
//! c1,1,0.5,-1.25,0,3
//! c1,2,...
//! ```
//!
//! The header is `modality,dim`; each row is
//! `conversation_id,utterance_index,v1,...,v_dim`. Floats are written in their
//! shortest round-tripping decimal form, so `load(save(t)) == t` bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, EmotionLabel, UtteranceKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }

    /// Encoder-scale default width for synthetic features.
    pub fn default_dim(self) -> usize {
        match self {
            Modality::Text => 256,
            Modality::Audio => 128,
            Modality::Visual => 160,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" => Ok(Modality::Text),
            "audio" => Ok(Modality::Audio),
            "visual" => Ok(Modality::Visual),
            other => Err(FeatureError::UnknownModality(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("line {line}: malformed header: {message}")]
    Header { line: u64, message: String },
    #[error("line {line}: malformed row: {message}")]
    Row { line: u64, message: String },
    #[error("row {key}: expected {expected} values, found {found}")]
    Dimension {
        key: UtteranceKey,
        expected: usize,
        found: usize,
    },
    #[error("row {key}: duplicate key")]
    DuplicateKey { key: UtteranceKey },
    #[error("row {key}: non-finite value at position {position}")]
    NonFinite { key: UtteranceKey, position: usize },
    #[error("file declares modality {found} but {expected} was requested")]
    ModalityMismatch { expected: Modality, found: Modality },
    #[error("conversation id `{0}` cannot be written: it contains a comma or newline")]
    UnwritableId(String),
    #[error("synthetic features need dim >= 7, got {0}")]
    DimTooSmall(usize),
    #[error("signal must lie in [0, 1], got {0}")]
    SignalRange(f64),
    #[error("utterance {0} has no gold emotion")]
    MissingLabel(UtteranceKey),
    #[error("alignment needs at least one feature table")]
    NoTables,
    #[error("two tables provided for modality {0}")]
    DuplicateModality(Modality),
    #[error("strict alignment failed; missing: {}", format_missing(.0))]
    Missing(Vec<(UtteranceKey, Modality)>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_missing(missing: &[(UtteranceKey, Modality)]) -> String {
    let mut parts: Vec<String> = missing
        .iter()
        .take(20)
        .map(|(k, m)| format!("({}, {})/{}", k.conversation_id, k.utterance, m))
        .collect();
    if missing.len() > 20 {
        parts.push(format!("... {} more", missing.len() - 20));
    }
    parts.join(", ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub modality: Modality,
    pub dim: usize,
    pub rows: BTreeMap<UtteranceKey, Vec<f64>>,
}

impl FeatureTable {
    pub fn new(modality: Modality, dim: usize) -> Self {
        FeatureTable {
            modality,
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: UtteranceKey, vector: Vec<f64>) -> Result<(), FeatureError> {
        check_row(&key, &vector, self.dim)?;
        if self.rows.contains_key(&key) {
            return Err(FeatureError::DuplicateKey { key });
        }
        self.rows.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, key: &UtteranceKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<(), FeatureError> {
        let mut out = csv::WriterBuilder::new()
            .flexible(true)
            .has_headers(false)
            .from_writer(writer);
        out.write_record([self.modality.as_str(), &self.dim.to_string()])?;
        let mut record = Vec::with_capacity(self.dim + 2);
        for (key, vector) in &self.rows {
            if key.conversation_id.contains([',', '\n', '\r', '"']) {
                return Err(FeatureError::UnwritableId(key.conversation_id.clone()));
            }
            record.clear();
            record.push(key.conversation_id.clone());
            record.push(key.utterance.to_string());
            record.extend(vector.iter().map(|v| v.to_string()));
            out.write_record(&record)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let file = std::fs::File::create(path).map_err(|source| FeatureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_to(std::io::BufWriter::new(file))
    }

    /// Reads a table; `expected` guards against loading the wrong modality's file.
    pub fn read_from<R: Read>(reader: R, expected: Option<Modality>) -> Result<Self, FeatureError> {
        let mut input = csv::ReaderBuilder::new()
            .flexible(true)
            .has_headers(false)
            .from_reader(reader);
        let mut records = input.records();
        let header = records.next().ok_or(FeatureError::Header {
            line: 1,
            message: "empty file".into(),
        })??;
        if header.len() != 2 {
            return Err(FeatureError::Header {
                line: 1,
                message: format!("expected `modality,dim`, found {} fields", header.len()),
            });
        }
        let modality: Modality = header[0].parse()?;
        if let Some(expected) = expected {
            if expected != modality {
                return Err(FeatureError::ModalityMismatch {
                    expected,
                    found: modality,
                });
            }
        }
        let dim: usize = header[1]
            .trim()
            .parse()
            .ok()
            .filter(|d| *d > 0)
            .ok_or_else(|| FeatureError::Header {
                line: 1,
                message: format!("dim `{}` is not a positive integer", &header[1]),
            })?;

        let mut table = FeatureTable::new(modality, dim);
        for record in records {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() < 2 {
                return Err(FeatureError::Row {
                    line,
                    message: "missing conversation id or utterance index".into(),
                });
            }
            let utterance = record[1].trim().parse().map_err(|_| FeatureError::Row {
                line,
                message: format!("utterance index `{}` is not an integer", &record[1]),
            })?;
            let key = UtteranceKey::new(&record[0], utterance);
            let vector = record
                .iter()
                .skip(2)
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| FeatureError::Row {
                    line,
                    message: format!("row {key}: {e}"),
                })?;
            table.insert(key, vector)?;
        }
        Ok(table)
    }
}

fn check_row(key: &UtteranceKey, vector: &[f64], dim: usize) -> Result<(), FeatureError> {
    if vector.len() != dim {
        return Err(FeatureError::Dimension {
            key: key.clone(),
            expected: dim,
            found: vector.len(),
        });
    }
    if let Some(position) = vector.iter().position(|v| !v.is_finite()) {
        return Err(FeatureError::NonFinite {
            key: key.clone(),
            position,
        });
    }
    Ok(())
}

pub fn load_features(path: &Path, modality: Modality) -> Result<FeatureTable, FeatureError> {
    let file = std::fs::File::open(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    FeatureTable::read_from(std::io::BufReader::new(file), Some(modality))
}

/// Options for [`synth_features`].
#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub dim: usize,
    /// Mixing weight between the class embedding and unit-variance noise.
    pub signal: f64,
    pub seed: u64,
    /// Classes this modality can see. Utterances of other classes get a zero
    /// embedding, so the modality carries no information about them.
    pub visible: Option<BTreeSet<EmotionLabel>>,
}

impl SynthOptions {
    pub fn new(dim: usize, signal: f64, seed: u64) -> Self {
        SynthOptions {
            dim,
            signal,
            seed,
            visible: None,
        }
    }
}

/// Class embedding: the one-hot pattern of the class repeated along `dim`
/// (`e[j] = 1` iff `j % 7 == class`).
pub fn class_embedding(label: EmotionLabel, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            if j % EmotionLabel::COUNT == label.index() {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Generates `signal * embedding(gold) + (1 - signal) * noise` for every
/// utterance, in conversation order. Deterministic in (conversations,
/// modality, options).
pub fn synth_features<'a>(
    conversations: impl IntoIterator<Item = &'a Conversation>,
    modality: Modality,
    options: &SynthOptions,
) -> Result<FeatureTable, FeatureError> {
    if options.dim < EmotionLabel::COUNT {
        return Err(FeatureError::DimTooSmall(options.dim));
    }
    if !(0.0..=1.0).contains(&options.signal) {
        return Err(FeatureError::SignalRange(options.signal));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    // Each modality draws from its own stream so tables are independent.
    rng.set_stream(modality as u64 + 1);

    let embeddings: Vec<Vec<f64>> = EmotionLabel::ALL
        .iter()
        .map(|&label| match &options.visible {
            Some(visible) if !visible.contains(&label) => vec![0.0; options.dim],
            _ => class_embedding(label, options.dim),
        })
        .collect();

    let mut table = FeatureTable::new(modality, options.dim);
    let signal = options.signal;
    for conv in conversations {
        for utt in &conv.utterances {
            let key = UtteranceKey::new(&conv.id, utt.index);
            let label = utt
                .gold_emotion
                .ok_or_else(|| FeatureError::MissingLabel(key.clone()))?;
            let embedding = &embeddings[label.index()];
            let vector = embedding
                .iter()
                .map(|e| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    signal * e + (1.0 - signal) * noise
                })
                .collect();
            table.insert(key, vector)?;
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignPolicy {
    Strict,
    MaskMissing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub key: UtteranceKey,
    /// Present modalities and their vectors; the key set is the example's mask.
    pub features: BTreeMap<Modality, Vec<f64>>,
    pub label: Option<EmotionLabel>,
}

impl Example {
    pub fn mask(&self) -> impl Iterator<Item = Modality> + '_ {
        self.features.keys().copied()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignedDataset {
    pub examples: Vec<Example>,
    pub dims: BTreeMap<Modality, usize>,
    /// Utterances dropped because no table had them (mask-missing only).
    pub dropped: usize,
}

impl AlignedDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Keeps only the given modalities; examples left with an empty mask are
    /// removed.
    pub fn restrict(&self, keep: &[Modality]) -> AlignedDataset {
        let examples = self
            .examples
            .iter()
            .filter_map(|ex| {
                let features: BTreeMap<_, _> = ex
                    .features
                    .iter()
                    .filter(|(m, _)| keep.contains(m))
                    .map(|(m, v)| (*m, v.clone()))
                    .collect();
                (!features.is_empty()).then(|| Example {
                    key: ex.key.clone(),
                    features,
                    label: ex.label,
                })
            })
            .collect();
        AlignedDataset {
            examples,
            dims: self
                .dims
                .iter()
                .filter(|(m, _)| keep.contains(m))
                .map(|(m, d)| (*m, *d))
                .collect(),
            dropped: self.dropped,
        }
    }
}

/// Joins corpus utterances with feature rows.
pub fn align<'a>(
    conversations: impl IntoIterator<Item = &'a Conversation>,
    tables: &[&FeatureTable],
    policy: AlignPolicy,
) -> Result<AlignedDataset, FeatureError> {
    if tables.is_empty() {
        return Err(FeatureError::NoTables);
    }
    let mut dims = BTreeMap::new();
    for table in tables {
        if dims.insert(table.modality, table.dim).is_some() {
            return Err(FeatureError::DuplicateModality(table.modality));
        }
    }

    let mut dataset = AlignedDataset {
        dims,
        ..Default::default()
    };
    let mut missing = Vec::new();
    for conv in conversations {
        for utt in &conv.utterances {
            let key = UtteranceKey::new(&conv.id, utt.index);
            let mut features = BTreeMap::new();
            for table in tables {
                match table.get(&key) {
                    Some(v) => {
                        features.insert(table.modality, v.to_vec());
                    }
                    None => missing.push((key.clone(), table.modality)),
                }
            }
            if features.is_empty() {
                dataset.dropped += 1;
                continue;
            }
            dataset.examples.push(Example {
                key,
                features,
                label: utt.gold_emotion,
            });
        }
    }
    if policy == AlignPolicy::Strict && !missing.is_empty() {
        return Err(FeatureError::Missing(missing));
    }
    if dataset.dropped > 0 {
        tracing::warn!(
            dropped = dataset.dropped,
            "utterances absent from every feature table"
        );
    }
    Ok(dataset)
}
