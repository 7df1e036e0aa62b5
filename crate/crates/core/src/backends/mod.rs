//! Perception, reasoning and scoring backends.
//!
//! Three families implement the same traits: an HTTP chat-completion client,
//! scripted oracles that read simulator ground truth, and deterministic mocks.

mod mock;
mod oracle;
mod remote;

use std::sync::Arc;

pub use mock::{MockBackend, MOCK_HALF_LOGPROB};
pub use oracle::{
    answer_polarity, entity_in, ground_truth_polarity, OraclePerception, ScriptedOracleConfig,
    ScriptedReasoner, QUESTION_PREFIX,
};
pub use remote::{CassetteMode, RemoteClient, RemoteConfig, RemotePerception, RemoteReasoner, RemoteScorer};

use crate::types::{Observation, Question};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("script exhausted after {0} response(s)")]
    ScriptExhausted(usize),
    #[error("malformed question `{0}`: expected it to begin with \"Do you see\"")]
    QuestionFormat(String),
    #[error("scripted reasoner cannot handle this prompt: {0}")]
    UnrecognizedPrompt(String),
    #[error("cassette: {0}")]
    Cassette(String),
    #[error("continuation to score is empty")]
    EmptyContinuation,
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

/// The vision-language role: scene descriptions and visual answers.
pub trait PerceptionModel: Send + Sync {
    fn describe(&self, prompt: &str, obs: &Observation) -> Result<String, BackendError>;
    fn answer(&self, question: &Question, obs: &Observation) -> Result<String, BackendError>;
    fn id(&self) -> &str;
}

/// The language role: question generation and description merging.
pub trait ReasoningModel: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
    fn id(&self) -> &str;
}

/// Per-token log-probabilities of `continuation` following `context`.
pub trait ScoringModel: Send + Sync {
    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<Vec<f64>, BackendError>;
}

impl<T: PerceptionModel + ?Sized> PerceptionModel for Arc<T> {
    fn describe(&self, prompt: &str, obs: &Observation) -> Result<String, BackendError> {
        (**self).describe(prompt, obs)
    }
    fn answer(&self, question: &Question, obs: &Observation) -> Result<String, BackendError> {
        (**self).answer(question, obs)
    }
    fn id(&self) -> &str {
        (**self).id()
    }
}

impl<T: ReasoningModel + ?Sized> ReasoningModel for Arc<T> {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(prompt)
    }
    fn id(&self) -> &str {
        (**self).id()
    }
}

impl<T: ScoringModel + ?Sized> ScoringModel for Arc<T> {
    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        (**self).token_logprobs(context, continuation)
    }
}
