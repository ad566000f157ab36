//! Text generation and embedding backends.
//!
//! Every agent talks to a language model through [`Backend`]. Two
//! implementations ship: [`HttpBackend`] for OpenAI-compatible servers and
//! [`ScriptedWorld`], a deterministic stand-in whose hidden rules make the
//! optimal planning policy known.

mod http;
mod mock;
pub mod prompts;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use mock::{
    GenerateOptions, ProblemRule, ScriptedWorld, WorldSpec, MARK_DONE, MARK_PROGRESS, MARK_STALLED,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("backend returned HTTP {status}: {body}")]
    Backend { status: u16, body: String },

    #[error("prompt exceeds the backend context window: {0}")]
    ContextOverflow(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("malformed backend response: {0}")]
    Decode(String),

    #[error("scenario error: {0}")]
    Scenario(String),
}

impl GatewayError {
    pub fn is_context_overflow(&self) -> bool {
        matches!(self, GatewayError::ContextOverflow(_))
    }
}

/// A single completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    /// Greedy request with the default token budget.
    pub fn greedy(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: 512,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64, seed: Option<u64>) -> Self {
        self.temperature = temperature;
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A dense text representation with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::Decode("empty embedding".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GatewayError::Decode(format!(
                "non-finite embedding entry at {i}"
            )));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A language-model service. Implementations must be shareable across
/// threads; concurrent calls are independent.
pub trait Backend: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<String, GatewayError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError>;

    /// Embedding dimension, constant for the lifetime of the backend.
    fn embedding_dim(&self) -> Result<usize, GatewayError>;

    /// Short description recorded in run manifests.
    fn identity(&self) -> String;
}

pub type SharedBackend = Arc<dyn Backend>;
