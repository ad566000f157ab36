use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, EmbeddingVector, GatewayError, GenerationRequest};

pub const API_KEY_ENV: &str = "COPLANNER_API_KEY";
pub const BASE_URL_ENV: &str = "COPLANNER_BASE_URL";

/// Connection settings for an OpenAI-compatible server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub timeout_secs: u64,
    /// Attempts for transport failures; HTTP errors are never retried.
    pub max_attempts: u32,
    pub backoff_ms: u64,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://127.0.0.1:8000".into(),
            chat_model: "default".into(),
            embedding_model: "default".into(),
            timeout_secs: 120,
            max_attempts: 3,
            backoff_ms: 250,
            api_key: None,
        }
    }
}

impl HttpConfig {
    /// Applies `COPLANNER_BASE_URL` and `COPLANNER_API_KEY` when set.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            if !url.is_empty() {
                self.base_url = url;
            }
        }
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }
}

/// Blocking client for `/v1/chat/completions` and `/v1/embeddings`.
pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    dim: OnceLock<usize>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

const BODY_EXCERPT: usize = 300;

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpBackend {
            cfg,
            client,
            dim: OnceLock::new(),
        })
    }

    fn url(&self, route: &str) -> String {
        let base = self.cfg.base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        format!("{base}/v1/{route}")
    }

    fn post(&self, route: &str, body: &serde_json::Value) -> Result<String, GatewayError> {
        let url = self.url(route);
        let attempts = self.cfg.max_attempts.max(1);
        let mut last_err = String::new();
        for attempt in 1..=attempts {
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.cfg.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp
                        .text()
                        .map_err(|e| GatewayError::Decode(e.to_string()))?;
                    if status.is_success() {
                        return Ok(text);
                    }
                    let excerpt: String = text.chars().take(BODY_EXCERPT).collect();
                    let lower = text.to_ascii_lowercase();
                    if status.as_u16() == 400
                        && lower.contains("context")
                        && (lower.contains("length") || lower.contains("window"))
                    {
                        return Err(GatewayError::ContextOverflow(excerpt));
                    }
                    return Err(GatewayError::Backend {
                        status: status.as_u16(),
                        body: excerpt,
                    });
                }
                Err(e) => {
                    last_err = e.to_string();
                    log::warn!("{route}: attempt {attempt}/{attempts} failed: {last_err}");
                    if attempt < attempts {
                        let wait = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1));
                        std::thread::sleep(Duration::from_millis(wait));
                    }
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last_err,
        })
    }
}

impl Backend for HttpBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let mut body = json!({
            "model": self.cfg.chat_model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let text = self.post("chat/completions", &body)?;
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::Decode(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Decode("response has no message content".into()))
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::InvalidRequest("empty text".into()));
        }
        let body = json!({"model": self.cfg.embedding_model, "input": text});
        let raw = self.post("embeddings", &body)?;
        let parsed: EmbeddingResponse =
            serde_json::from_str(&raw).map_err(|e| GatewayError::Decode(e.to_string()))?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Decode("response has no embedding".into()))?
            .embedding;
        let v = EmbeddingVector::new(values)?;
        let d = *self.dim.get_or_init(|| v.dim());
        if v.dim() != d {
            return Err(GatewayError::Decode(format!(
                "embedding dimension changed from {d} to {}",
                v.dim()
            )));
        }
        Ok(v)
    }

    fn embedding_dim(&self) -> Result<usize, GatewayError> {
        if let Some(d) = self.dim.get() {
            return Ok(*d);
        }
        Ok(self.embed("dimension probe")?.dim())
    }

    fn identity(&self) -> String {
        format!(
            "http:{} chat={} embed={}",
            self.cfg.base_url, self.cfg.chat_model, self.cfg.embedding_model
        )
    }
}
