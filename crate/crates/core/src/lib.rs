//! Two-stage emotion-cause pair extraction for conversations.
//!
//! Stage one ([`fusion`]) classifies each utterance's emotion from
//! per-modality feature vectors with an attention-fusion network. Stage two
//! ([`cause`]) asks a generative model which utterance in a history window
//! caused each non-neutral emotion and maps the reply back onto an utterance.
//! [`metrics`] scores the resulting `(emotion utterance, emotion, cause
//! utterance)` pairs.

pub mod cause;
pub mod cli;
pub mod corpus;
pub mod features;
pub mod fusion;
pub mod metrics;
