//! Generative cause extraction: prompts built from a history window, a
//! swappable generative client, similarity matching of the reply back onto a
//! candidate utterance, and pair assembly. Also heuristic baselines.

pub mod client;
pub mod matching;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{
    generate, generate_all, GeneratedResponse, GenerationError, GenerationRequest,
    GenerativeClient, HttpClient, ScriptedClient,
};
pub use matching::{is_no_cause, match_cause, normalize, token_f1, CauseDecision, DecisionStatus};

use crate::corpus::{
    history_window, Conversation, CorpusError, EmotionCausePair, EmotionLabel, UtteranceKey,
};
use crate::fusion::EmotionPrediction;
use crate::metrics::PairSet;

pub const DEFAULT_TEMPLATE: &str = "default";
pub const DEFAULT_THRESHOLD: f64 = 0.3;

#[derive(Debug, Error)]
pub enum CauseError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("target {0} is neutral; neutral utterances never reach cause extraction")]
    NeutralTarget(UtteranceKey),
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
    #[error("decision for {0} has no matching prediction")]
    Consistency(UtteranceKey),
    #[error("conversation `{0}` not found")]
    UnknownConversation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub window: usize,
    pub template_id: String,
    pub include_image: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            window: 5,
            template_id: DEFAULT_TEMPLATE.to_string(),
            include_image: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub text: String,
    pub image_ref: Option<String>,
    pub target: UtteranceKey,
    /// History-window utterance indices, the target last.
    pub candidates: Vec<u32>,
}

/// Renders the cause-extraction prompt for one emotion utterance.
///
/// ```text
/// Below is part of a conversation. Find the utterance that caused the emotion of the final speaker.
/// [Rachel] U4: Cat.
/// [Ross] U5: Yes! You are so smart! I love you.
/// [Rachel] U6: I love you too.
/// The speaker Rachel expressed joy in utterance U6. Which utterance caused this emotion? Reply with that utterance's text, or 'none'.
/// ```
pub fn build_prompt(
    conv: &Conversation,
    target: u32,
    emotion: EmotionLabel,
    config: &PromptConfig,
) -> Result<Prompt, CauseError> {
    let key = UtteranceKey::new(&conv.id, target);
    if emotion.is_neutral() {
        return Err(CauseError::NeutralTarget(key));
    }
    if config.template_id != DEFAULT_TEMPLATE {
        return Err(CauseError::UnknownTemplate(config.template_id.clone()));
    }
    let window = history_window(conv, target, config.window)?;
    let focus = window.last().expect("window ends with the target");

    let mut text = String::from(
        "Below is part of a conversation. Find the utterance that caused the emotion of the final speaker.\n",
    );
    for utt in window {
        let _ = writeln!(text, "[{}] U{}: {}", utt.speaker, utt.index, utt.text);
    }
    let _ = write!(
        text,
        "The speaker {} expressed {} in utterance U{}. Which utterance caused this emotion? \
         Reply with that utterance's text, or 'none'.",
        focus.speaker, emotion, focus.index
    );

    let image_ref = if config.include_image {
        focus.media.as_ref().and_then(|m| {
            m.get("image")
                .or_else(|| m.get("video"))
                .or_else(|| m.values().next())
                .cloned()
        })
    } else {
        None
    };
    Ok(Prompt {
        text,
        image_ref,
        target: key,
        candidates: window.iter().map(|u| u.index).collect(),
    })
}

/// An utterance paired with the emotion assigned to it (predicted or gold).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetEmotion {
    pub key: UtteranceKey,
    pub emotion: EmotionLabel,
}

impl From<&EmotionPrediction> for TargetEmotion {
    fn from(p: &EmotionPrediction) -> Self {
        TargetEmotion {
            key: p.key.clone(),
            emotion: p.predicted,
        }
    }
}

/// Joins emotions with cause decisions. Neutral targets and abstaining
/// decisions emit nothing.
pub fn assemble_pairs(
    emotions: &[TargetEmotion],
    decisions: &[CauseDecision],
) -> Result<PairSet, CauseError> {
    let by_key: BTreeMap<&UtteranceKey, EmotionLabel> =
        emotions.iter().map(|t| (&t.key, t.emotion)).collect();
    let mut pairs = PairSet::new();
    for decision in decisions {
        let key = UtteranceKey::new(&decision.conversation_id, decision.target);
        let emotion = *by_key
            .get(&key)
            .ok_or(CauseError::Consistency(key.clone()))?;
        if let (false, Some(cause)) = (emotion.is_neutral(), decision.cause) {
            pairs
                .entry(key.conversation_id)
                .or_default()
                .push(EmotionCausePair::new(decision.target, emotion, cause));
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeuristicStrategy {
    /// The emotion utterance is its own cause.
    #[serde(rename = "self")]
    SelfCause,
    /// The preceding utterance is the cause (the utterance itself for U1).
    Previous,
}

/// Rule-based causes for one conversation's predicted emotions.
pub fn heuristic_causes(
    conv: &Conversation,
    emotions: &[(u32, EmotionLabel)],
    strategy: HeuristicStrategy,
) -> Vec<EmotionCausePair> {
    emotions
        .iter()
        .filter(|(_, e)| !e.is_neutral())
        .map(|&(index, emotion)| {
            let cause = match strategy {
                HeuristicStrategy::SelfCause => index,
                HeuristicStrategy::Previous => {
                    if index > 1 && conv.utterance(index - 1).is_some() {
                        index - 1
                    } else {
                        index
                    }
                }
            };
            EmotionCausePair::new(index, emotion, cause)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    pub prompt: PromptConfig,
    pub threshold: f64,
    pub max_in_flight: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            prompt: PromptConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSummary {
    pub targets: usize,
    pub pairs: usize,
    pub generation_failures: usize,
    pub empty_responses: usize,
    pub abstentions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionOutput {
    pub decisions: Vec<CauseDecision>,
    pub pairs: PairSet,
    pub summary: ExtractionSummary,
}

/// Prompt → generate → match → assemble over every non-neutral target.
///
/// Generation failures are recorded as no-cause decisions and counted; they do
/// not abort the run.
pub fn extract_causes(
    conversations: &[&Conversation],
    emotions: &[TargetEmotion],
    client: &dyn GenerativeClient,
    config: &ExtractionConfig,
) -> Result<ExtractionOutput, CauseError> {
    let by_id: BTreeMap<&str, &Conversation> =
        conversations.iter().map(|c| (c.id.as_str(), *c)).collect();

    let mut prompts = Vec::new();
    for target in emotions.iter().filter(|t| !t.emotion.is_neutral()) {
        let conv = by_id
            .get(target.key.conversation_id.as_str())
            .ok_or_else(|| CauseError::UnknownConversation(target.key.conversation_id.clone()))?;
        prompts.push(build_prompt(
            conv,
            target.key.utterance,
            target.emotion,
            &config.prompt,
        )?);
    }

    let responses = generate_all(client, &prompts, config.max_in_flight);
    let mut summary = ExtractionSummary {
        targets: prompts.len(),
        ..Default::default()
    };
    let mut decisions = Vec::with_capacity(prompts.len());
    for (prompt, response) in prompts.iter().zip(responses) {
        let id = &prompt.target.conversation_id;
        let target = prompt.target.utterance;
        let decision = match response {
            Ok(response) => {
                if response.text.trim().is_empty() {
                    summary.empty_responses += 1;
                }
                let conv = by_id[id.as_str()];
                let candidates: Vec<(u32, &str)> = prompt
                    .candidates
                    .iter()
                    .map(|&i| {
                        (
                            i,
                            conv.utterance(i).expect("candidate exists").text.as_str(),
                        )
                    })
                    .collect();
                match_cause(id, target, &response.text, &candidates, config.threshold)
            }
            Err(err) => {
                tracing::warn!(target = %prompt.target, error = %err, "generation failed");
                summary.generation_failures += 1;
                CauseDecision::failed(id, target, err.to_string())
            }
        };
        if decision.cause.is_none() {
            summary.abstentions += 1;
        }
        decisions.push(decision);
    }

    let pairs = assemble_pairs(emotions, &decisions)?;
    summary.pairs = pairs.values().map(Vec::len).sum();
    Ok(ExtractionOutput {
        decisions,
        pairs,
        summary,
    })
}

pub fn write_decisions<W: Write>(
    decisions: &[CauseDecision],
    mut writer: W,
) -> std::io::Result<()> {
    for d in decisions {
        serde_json::to_writer(&mut writer, d)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}
