//! Annotated conversation corpora: emotion labels, utterances, gold
//! emotion-cause pairs, parsing (canonical and ECF layouts), validation and
//! history-window slicing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::{SerializeTuple, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One of the seven conversational emotion classes.
///
/// Variant order is the fixed precedence used for argmax tie-breaking and for
/// class indices throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmotionLabel {
    Anger,
    Disgust,
    Fear,
    Joy,
    Neutral,
    Sadness,
    Surprise,
}

impl EmotionLabel {
    pub const COUNT: usize = 7;

    pub const ALL: [EmotionLabel; 7] = [
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Joy,
        EmotionLabel::Neutral,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
    ];

    /// The six categories that carry emotion-cause pairs and are scored.
    pub const SCORED: [EmotionLabel; 6] = [
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Joy,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Joy => "joy",
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Surprise => "surprise",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<EmotionLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn is_neutral(self) -> bool {
        self == EmotionLabel::Neutral
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown emotion label `{0}`")]
pub struct UnknownEmotion(pub String);

impl FromStr for EmotionLabel {
    type Err = UnknownEmotion;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lowered = s.trim().to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|label| label.as_str() == lowered)
            .ok_or_else(|| UnknownEmotion(s.to_string()))
    }
}

impl Serialize for EmotionLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EmotionLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(de::Error::custom)
    }
}

/// A single turn in a conversation. Indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: u32,
    pub speaker: String,
    pub text: String,
    #[serde(default, rename = "emotion", skip_serializing_if = "Option::is_none")]
    pub gold_emotion: Option<EmotionLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<BTreeMap<String, String>>,
}

/// `(emotion utterance, emotion category, cause utterance)`.
///
/// Serialized as the compact triple `[eu, "emotion", cu]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EmotionCausePair {
    pub emotion_utterance: u32,
    pub emotion: EmotionLabel,
    pub cause_utterance: u32,
}

impl EmotionCausePair {
    pub fn new(emotion_utterance: u32, emotion: EmotionLabel, cause_utterance: u32) -> Self {
        EmotionCausePair {
            emotion_utterance,
            emotion,
            cause_utterance,
        }
    }
}

impl fmt::Display for EmotionCausePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(U{}, {}, U{})",
            self.emotion_utterance, self.emotion, self.cause_utterance
        )
    }
}

impl Serialize for EmotionCausePair {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut tuple = serializer.serialize_tuple(3)?;
        tuple.serialize_element(&self.emotion_utterance)?;
        tuple.serialize_element(&self.emotion)?;
        tuple.serialize_element(&self.cause_utterance)?;
        tuple.end()
    }
}

impl<'de> Deserialize<'de> for EmotionCausePair {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let (emotion_utterance, emotion, cause_utterance) =
            <(u32, EmotionLabel, u32)>::deserialize(deserializer)?;
        Ok(EmotionCausePair {
            emotion_utterance,
            emotion,
            cause_utterance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    #[serde(default, rename = "pairs")]
    pub gold_pairs: Vec<EmotionCausePair>,
}

impl Conversation {
    pub fn utterance(&self, index: u32) -> Option<&Utterance> {
        // Validated corpora are dense and 1-based; fall back to a scan otherwise.
        match self.utterances.get((index as usize).wrapping_sub(1)) {
            Some(u) if u.index == index => Some(u),
            _ => self.utterances.iter().find(|u| u.index == index),
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Identifies one utterance across a corpus.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UtteranceKey {
    pub conversation_id: String,
    pub utterance: u32,
}

impl UtteranceKey {
    pub fn new(conversation_id: impl Into<String>, utterance: u32) -> Self {
        UtteranceKey {
            conversation_id: conversation_id.into(),
            utterance,
        }
    }
}

impl fmt::Display for UtteranceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.conversation_id, self.utterance)
    }
}

impl FromStr for UtteranceKey {
    type Err = String;

    /// Parses `conversation_id:utterance_index`; the id may itself contain `:`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (id, index) = s
            .rsplit_once(':')
            .ok_or_else(|| format!("key `{s}` is not of the form id:index"))?;
        let utterance = index
            .parse()
            .map_err(|_| format!("key `{s}` has a non-integer utterance index"))?;
        if id.is_empty() {
            return Err(format!("key `{s}` has an empty conversation id"));
        }
        Ok(UtteranceKey::new(id, utterance))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<Conversation>,
    pub dev: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

impl CorpusSplit {
    pub fn part(&self, name: SplitName) -> &[Conversation] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Conversation> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Dev, SplitName::Test];
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SplitName::Train),
            "dev" | "valid" | "validation" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// A parsed corpus: either a flat list of conversations or a three-way split.
#[derive(Debug, Clone, PartialEq)]
pub enum Corpus {
    Flat(Vec<Conversation>),
    Split(CorpusSplit),
}

impl Corpus {
    pub fn conversations(&self) -> Vec<&Conversation> {
        match self {
            Corpus::Flat(convs) => convs.iter().collect(),
            Corpus::Split(split) => split.all().collect(),
        }
    }

    /// Conversations of one split. A flat corpus answers every split with all
    /// of its conversations.
    pub fn part(&self, name: SplitName) -> &[Conversation] {
        match self {
            Corpus::Flat(convs) => convs,
            Corpus::Split(split) => split.part(name),
        }
    }

    pub fn find(&self, id: &str) -> Option<&Conversation> {
        self.conversations().into_iter().find(|c| c.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.conversations().is_empty()
    }

    pub fn to_canonical_json(&self) -> String {
        let value = match self {
            Corpus::Flat(convs) => serde_json::to_string_pretty(convs),
            Corpus::Split(split) => serde_json::to_string_pretty(split),
        };
        value.expect("corpus serialization is infallible")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    CanonicalJson,
    EcfJson,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical" | "canonical-json" => Ok(CorpusFormat::CanonicalJson),
            "ecf" | "ecf-json" => Ok(CorpusFormat::EcfJson),
            other => Err(format!("unknown corpus format `{other}`")),
        }
    }
}

/// Rule identifiers reported by [`validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    EmptyId,
    DuplicateId,
    EmptyConversation,
    IndexSequence,
    EmptySpeaker,
    PairIndexRange,
    NeutralPair,
    EmotionMismatch,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::EmptyId => "empty-id",
            Rule::DuplicateId => "duplicate-id",
            Rule::EmptyConversation => "empty-conversation",
            Rule::IndexSequence => "index-sequence",
            Rule::EmptySpeaker => "empty-speaker",
            Rule::PairIndexRange => "pair-index-range",
            Rule::NeutralPair => "neutral-pair",
            Rule::EmotionMismatch => "emotion-mismatch",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub conversation_id: String,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {}",
            self.conversation_id, self.rule, self.message
        )
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{} validation violation(s); first: {}", .0.len(), .0[0])]
    Validation(Vec<Violation>),
    #[error("utterance U{index} not found in conversation `{conversation_id}`")]
    UnknownUtterance { conversation_id: String, index: u32 },
    #[error("split `{split}` has {actual} conversations but the manifest declares {expected}")]
    SplitCount {
        split: SplitName,
        expected: usize,
        actual: usize,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<serde_json::Error> for CorpusError {
    fn from(err: serde_json::Error) -> Self {
        CorpusError::Parse {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

/// Parses and validates a corpus. A top-level JSON array yields
/// [`Corpus::Flat`]; an object with `train`/`dev`/`test` keys yields
/// [`Corpus::Split`].
pub fn parse_corpus(raw: &[u8], format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let corpus = match format {
        CorpusFormat::CanonicalJson => parse_canonical(raw)?,
        CorpusFormat::EcfJson => ecf::parse(raw)?,
    };
    let violations = validate(&corpus);
    if violations.is_empty() {
        Ok(corpus)
    } else {
        Err(CorpusError::Validation(violations))
    }
}

/// Parses without validating; used by tooling that wants to report every
/// violation instead of failing on the first.
pub fn parse_unvalidated(raw: &[u8], format: CorpusFormat) -> Result<Corpus, CorpusError> {
    match format {
        CorpusFormat::CanonicalJson => parse_canonical(raw),
        CorpusFormat::EcfJson => ecf::parse(raw),
    }
}

fn parse_canonical(raw: &[u8]) -> Result<Corpus, CorpusError> {
    // Syntax check first so positions refer to the raw text.
    match serde_json::from_slice::<serde_json::Value>(raw)? {
        serde_json::Value::Array(_) => Ok(Corpus::Flat(serde_json::from_slice(raw)?)),
        serde_json::Value::Object(_) => Ok(Corpus::Split(serde_json::from_slice(raw)?)),
        _ => Err(CorpusError::Parse {
            line: 1,
            column: 1,
            message: "expected a list of conversations or a train/dev/test object".into(),
        }),
    }
}

pub fn validate(corpus: &Corpus) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    for conv in corpus.conversations() {
        if !seen.insert(conv.id.as_str()) {
            violations.push(Violation {
                conversation_id: conv.id.clone(),
                rule: Rule::DuplicateId,
                message: format!("conversation id `{}` occurs more than once", conv.id),
            });
        }
        validate_conversation(conv, &mut violations);
    }
    violations
}

pub fn validate_conversation(conv: &Conversation, out: &mut Vec<Violation>) {
    let mut push = |rule: Rule, message: String| {
        out.push(Violation {
            conversation_id: conv.id.clone(),
            rule,
            message,
        })
    };

    if conv.id.trim().is_empty() {
        push(Rule::EmptyId, "conversation id is empty".into());
    }
    if conv.utterances.is_empty() {
        push(
            Rule::EmptyConversation,
            "conversation has no utterances".into(),
        );
    }
    for (position, utt) in conv.utterances.iter().enumerate() {
        let expected = position as u32 + 1;
        if utt.index != expected {
            push(
                Rule::IndexSequence,
                format!(
                    "utterance at position {position} has index {} (expected {expected})",
                    utt.index
                ),
            );
        }
        if utt.speaker.trim().is_empty() {
            push(
                Rule::EmptySpeaker,
                format!("U{} has an empty speaker", utt.index),
            );
        }
    }

    let known: BTreeSet<u32> = conv.utterances.iter().map(|u| u.index).collect();
    for pair in &conv.gold_pairs {
        for index in [pair.emotion_utterance, pair.cause_utterance] {
            if !known.contains(&index) {
                push(
                    Rule::PairIndexRange,
                    format!("pair {pair} references U{index}, which does not exist"),
                );
            }
        }
        if pair.emotion.is_neutral() {
            push(
                Rule::NeutralPair,
                format!("pair {pair} carries the neutral label"),
            );
        }
        if let Some(gold) = conv
            .utterance(pair.emotion_utterance)
            .and_then(|u| u.gold_emotion)
        {
            if gold != pair.emotion {
                push(
                    Rule::EmotionMismatch,
                    format!(
                        "pair {pair} says {} but U{} is annotated {gold}",
                        pair.emotion, pair.emotion_utterance
                    ),
                );
            }
        }
    }
}

/// The up-to-`window` utterances preceding `target`, followed by the target.
pub fn history_window(
    conv: &Conversation,
    target: u32,
    window: usize,
) -> Result<&[Utterance], CorpusError> {
    let position = conv
        .utterances
        .iter()
        .position(|u| u.index == target)
        .ok_or_else(|| CorpusError::UnknownUtterance {
            conversation_id: conv.id.clone(),
            index: target,
        })?;
    let start = position.saturating_sub(window);
    Ok(&conv.utterances[start..=position])
}

/// Per-split release manifest: where each split lives and how many
/// conversations it must contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format: CorpusFormat,
    pub train: ManifestEntry,
    pub dev: ManifestEntry,
    pub test: ManifestEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub conversations: usize,
}

/// Loads the three files named by a manifest (paths relative to the manifest)
/// and checks each split's conversation count against the declared one.
pub fn load_manifest(path: &Path) -> Result<CorpusSplit, CorpusError> {
    let raw = read(path)?;
    let manifest: SplitManifest = serde_json::from_slice(&raw)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut split = CorpusSplit::default();
    for name in SplitName::ALL {
        let entry = match name {
            SplitName::Train => &manifest.train,
            SplitName::Dev => &manifest.dev,
            SplitName::Test => &manifest.test,
        };
        let convs = match parse_unvalidated(&read(&base.join(&entry.path))?, manifest.format)? {
            Corpus::Flat(convs) => convs,
            Corpus::Split(_) => {
                return Err(CorpusError::Parse {
                    line: 1,
                    column: 1,
                    message: format!("split file for `{name}` must be a flat list"),
                })
            }
        };
        if convs.len() != entry.conversations {
            return Err(CorpusError::SplitCount {
                split: name,
                expected: entry.conversations,
                actual: convs.len(),
            });
        }
        match name {
            SplitName::Train => split.train = convs,
            SplitName::Dev => split.dev = convs,
            SplitName::Test => split.test = convs,
        }
    }
    let corpus = Corpus::Split(split);
    let violations = validate(&corpus);
    if !violations.is_empty() {
        return Err(CorpusError::Validation(violations));
    }
    match corpus {
        Corpus::Split(split) => Ok(split),
        Corpus::Flat(_) => unreachable!(),
    }
}

pub fn read(path: &Path) -> Result<Vec<u8>, CorpusError> {
    std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a corpus file, or a split manifest when the file is a JSON object
/// with a `format` key.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let raw = read(path)?;
    if let Ok(serde_json::Value::Object(map)) = serde_json::from_slice::<serde_json::Value>(&raw) {
        if map.contains_key("format") {
            return load_manifest(path).map(Corpus::Split);
        }
    }
    parse_corpus(&raw, format)
}

/// Adapter for the public ECF release layout.
///
/// Each conversation looks like
/// `{"conversation_ID": 1, "conversation": [{"utterance_ID": 1, "text": ..,
/// "speaker": .., "emotion": .., "video_name": ..}], "emotion-cause_pairs":
/// [["3_joy", "1"], ...]}`. Cause entries may carry a span suffix
/// (`"1_some text"`), which is dropped.
pub mod ecf {
    use super::*;

    #[derive(Deserialize)]
    struct EcfConversation {
        #[serde(rename = "conversation_ID")]
        conversation_id: serde_json::Value,
        conversation: Vec<EcfUtterance>,
        #[serde(default, rename = "emotion-cause_pairs")]
        pairs: Vec<(String, String)>,
    }

    #[derive(Deserialize)]
    struct EcfUtterance {
        #[serde(rename = "utterance_ID")]
        utterance_id: u32,
        speaker: String,
        text: String,
        #[serde(default)]
        emotion: Option<String>,
        #[serde(default)]
        video_name: Option<String>,
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum EcfShape {
        Flat(Vec<EcfConversation>),
        Split {
            train: Vec<EcfConversation>,
            dev: Vec<EcfConversation>,
            test: Vec<EcfConversation>,
        },
    }

    pub(super) fn parse(raw: &[u8]) -> Result<Corpus, CorpusError> {
        // Syntax check first so errors carry a position.
        serde_json::from_slice::<serde_json::Value>(raw)?;
        match serde_json::from_slice::<EcfShape>(raw)? {
            EcfShape::Flat(convs) => Ok(Corpus::Flat(convert_all(convs)?)),
            EcfShape::Split { train, dev, test } => Ok(Corpus::Split(CorpusSplit {
                train: convert_all(train)?,
                dev: convert_all(dev)?,
                test: convert_all(test)?,
            })),
        }
    }

    fn convert_all(convs: Vec<EcfConversation>) -> Result<Vec<Conversation>, CorpusError> {
        convs.into_iter().map(convert).collect()
    }

    fn convert(conv: EcfConversation) -> Result<Conversation, CorpusError> {
        let id = match conv.conversation_id {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        let bad = |message: String| CorpusError::Parse {
            line: 0,
            column: 0,
            message: format!("conversation `{id}`: {message}"),
        };
        let utterances = conv
            .conversation
            .into_iter()
            .map(|u| {
                let gold_emotion = match u.emotion {
                    Some(e) => Some(e.parse().map_err(|e: UnknownEmotion| bad(e.to_string()))?),
                    None => None,
                };
                let media = u
                    .video_name
                    .map(|v| BTreeMap::from([("video".to_string(), v)]));
                Ok(Utterance {
                    index: u.utterance_id,
                    speaker: u.speaker,
                    text: u.text,
                    gold_emotion,
                    media,
                })
            })
            .collect::<Result<Vec<_>, CorpusError>>()?;
        let gold_pairs = conv
            .pairs
            .iter()
            .map(|(emotion_part, cause_part)| {
                let (eu, emotion) = emotion_part.split_once('_').ok_or_else(|| {
                    bad(format!(
                        "pair emotion `{emotion_part}` is not `index_emotion`"
                    ))
                })?;
                let cause = cause_part.split('_').next().unwrap_or_default();
                Ok(EmotionCausePair {
                    emotion_utterance: eu
                        .parse()
                        .map_err(|_| bad(format!("bad utterance index in `{emotion_part}`")))?,
                    emotion: emotion
                        .parse()
                        .map_err(|e: UnknownEmotion| bad(e.to_string()))?,
                    cause_utterance: cause
                        .parse()
                        .map_err(|_| bad(format!("bad cause index in `{cause_part}`")))?,
                })
            })
            .collect::<Result<Vec<_>, CorpusError>>()?;
        Ok(Conversation {
            id,
            utterances,
            gold_pairs,
        })
    }
}
