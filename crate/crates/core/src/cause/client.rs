//! Generative-model clients.
//!
//! Wire contract for remote models: `POST <endpoint>/generate` with JSON body
//! `{"prompt": "...", "image_ref": "..."}` (`image_ref` omitted when absent),
//! answered by `{"text": "..."}`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Prompt;
use crate::corpus::UtteranceKey;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenerationError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed reply: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerationRequest<'a> {
    #[serde(skip)]
    pub target: &'a UtteranceKey,
    pub prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<&'a str>,
}

#[derive(Debug, Clone, Deserialize)]
struct GenerationReply {
    text: String,
}

pub trait GenerativeClient: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &GenerationRequest<'_>) -> Result<String, GenerationError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedResponse {
    pub text: String,
    pub latency: Duration,
    pub client_id: String,
}

pub fn generate(
    client: &dyn GenerativeClient,
    prompt: &Prompt,
) -> Result<GeneratedResponse, GenerationError> {
    let request = GenerationRequest {
        target: &prompt.target,
        prompt: &prompt.text,
        image_ref: prompt.image_ref.as_deref(),
    };
    let started = Instant::now();
    let text = client.complete(&request)?;
    Ok(GeneratedResponse {
        text,
        latency: started.elapsed(),
        client_id: client.id().to_string(),
    })
}

/// Runs [`generate`] over all prompts with at most `max_in_flight` concurrent
/// requests. Results come back in prompt order.
pub fn generate_all(
    client: &dyn GenerativeClient,
    prompts: &[Prompt],
    max_in_flight: usize,
) -> Vec<Result<GeneratedResponse, GenerationError>> {
    let workers = max_in_flight.max(1).min(prompts.len());
    if workers <= 1 {
        return prompts.iter().map(|p| generate(client, p)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<GeneratedResponse, GenerationError>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(prompt) = prompts.get(i) else { break };
                let result = generate(client, prompt);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect()
}

/// Deterministic stand-in that answers from a fixture keyed by target
/// utterance. Targets without an entry get an empty response.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClient {
    responses: BTreeMap<UtteranceKey, String>,
}

impl ScriptedClient {
    pub fn new(responses: BTreeMap<UtteranceKey, String>) -> Self {
        ScriptedClient { responses }
    }

    /// Parses a fixture: a JSON object mapping `"conversation_id:index"` to
    /// response text.
    pub fn from_json(raw: &[u8]) -> Result<Self, String> {
        let map: BTreeMap<String, String> =
            serde_json::from_slice(raw).map_err(|e| format!("stub fixture: {e}"))?;
        let responses = map
            .into_iter()
            .map(|(k, v)| Ok((k.parse::<UtteranceKey>()?, v)))
            .collect::<Result<_, String>>()?;
        Ok(ScriptedClient { responses })
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&raw)
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, &String> = self
            .responses
            .iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }

    pub fn has(&self, key: &UtteranceKey) -> bool {
        self.responses.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl GenerativeClient for ScriptedClient {
    fn id(&self) -> &str {
        "scripted-stub"
    }

    fn complete(&self, request: &GenerationRequest<'_>) -> Result<String, GenerationError> {
        Ok(self
            .responses
            .get(request.target)
            .cloned()
            .unwrap_or_default())
    }
}

/// Blocking HTTP client for the `/generate` contract.
pub struct HttpClient {
    url: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpClient {
            url: format!("{}/generate", endpoint.trim_end_matches('/')),
            agent,
        }
    }
}

impl GenerativeClient for HttpClient {
    fn id(&self) -> &str {
        &self.url
    }

    fn complete(&self, request: &GenerationRequest<'_>) -> Result<String, GenerationError> {
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => GenerationError::Timeout,
                ureq::Error::StatusCode(code) => {
                    GenerationError::Transport(format!("HTTP status {code}"))
                }
                other => GenerationError::Transport(other.to_string()),
            })?;
        let body = response.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => GenerationError::Timeout,
            other => GenerationError::Transport(other.to_string()),
        })?;
        let reply: GenerationReply =
            serde_json::from_str(&body).map_err(|e| GenerationError::Malformed(e.to_string()))?;
        Ok(reply.text)
    }
}
