//! Model endpoints: configuration, the response cache and the dispatcher.
//!
//! A [`Backend`] turns one [`Job`] (optional image plus prompt text) into the
//! model's verbatim text. The [`Dispatcher`] wraps a backend with the
//! response cache, retries and the in-flight bound.

mod cache;
mod dispatch;
mod http;
mod mock;
mod subprocess;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PersonRecord;
use crate::prompts::{AnswerMode, RenderedPrompt};

pub use cache::{CacheEntry, CacheError, CacheKey, ResponseCache, CACHE_FORMAT, CACHE_VERSION};
pub use dispatch::{BatchStats, Dispatcher, Permit, Semaphore};
pub use http::{HttpAdapter, ImageTransport, Preset, RemoteHttpBackend};
pub use mock::{
    oracle_uniform, BiasedOracle, BiasedOracleSpec, MockEntry, MockFailure, MockTable, OracleCell, WrongChoice,
};
pub use subprocess::SubprocessBackend;

/// Digest recorded for requests that carry no image.
pub const NO_IMAGE_DIGEST: &str = "none";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("credential environment variable `{0}` is not set")]
    AuthMissing(String),
    #[error("upstream returned {status}: {body}")]
    UpstreamError { status: u16, body: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("cannot read image {path}: {message}")]
    ImageUnreadable { path: String, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Failures worth another attempt.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::RateLimited { .. } | BackendError::Transport(_) => true,
            BackendError::UpstreamError { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// What the oracle backends need to know about a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub answer_mode: AnswerMode,
    pub candidate_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<String>,
}

/// One request: an optional image and the prompt text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub image_id: String,
    pub image: Option<PathBuf>,
    pub prompt: String,
    pub context: Option<PromptContext>,
}

impl Job {
    pub fn for_prompt(record: &PersonRecord, prompt: &RenderedPrompt) -> Self {
        Job {
            image_id: record.image_id.clone(),
            image: Some(record.image_path.clone()),
            prompt: prompt.text.clone(),
            context: Some(PromptContext {
                answer_mode: prompt.answer_mode,
                candidate_labels: prompt.candidate_labels.clone(),
                expected: prompt.expected.clone(),
            }),
        }
    }

    pub fn with_image(image_id: &str, image: &Path, prompt: &str) -> Self {
        Job {
            image_id: image_id.to_string(),
            image: Some(image.to_path_buf()),
            prompt: prompt.to_string(),
            context: None,
        }
    }

    /// A request without any image payload.
    pub fn text_only(image_id: &str, prompt: &str) -> Self {
        Job {
            image_id: image_id.to_string(),
            image: None,
            prompt: prompt.to_string(),
            context: None,
        }
    }

    pub fn prompt_digest(&self) -> String {
        crate::prompts::text_digest(&self.prompt)
    }
}

/// A model endpoint.
pub trait Backend: Send + Sync {
    /// Send one request and return the model text verbatim.
    fn call(&self, job: &Job) -> Result<String, BackendError>;
}

/// One model response with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub image_id: String,
    pub prompt_digest: String,
    pub backend_id: String,
    /// Byte-exact model output.
    pub text: String,
    pub latency_ms: u64,
    pub from_cache: bool,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before retry `i` is `backoff_ms[min(i, len - 1)]`.
    #[serde(default)]
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: vec![500, 2000, 8000],
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_attempts: 1,
            backoff_ms: Vec::new(),
        }
    }

    pub fn delay_before_retry(&self, retry_index: usize) -> Duration {
        self.backoff_ms
            .get(retry_index)
            .or(self.backoff_ms.last())
            .map_or(Duration::ZERO, |&ms| Duration::from_millis(ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    RemoteHttp {
        endpoint: String,
        adapter: HttpAdapter,
    },
    LocalSubprocess {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
    MockTable {
        /// JSON-lines table file; see [`MockTable::load`].
        #[serde(default, skip_serializing_if = "Option::is_none")]
        table: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        entries: Vec<MockEntry>,
    },
    MockBiasedOracle(BiasedOracleSpec),
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout_ms() -> u64 {
    120_000
}

/// Endpoint configuration. Credentials are never stored here, only the name
/// of the environment variable that holds them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend_id: String,
    pub model_name: String,
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_source: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Price estimate for `--dry-run`, per 1000 prompt characters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_per_1k_chars: Option<f64>,
    /// Passthrough request fields (sampling temperature and the like).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra_body: BTreeMap<String, serde_json::Value>,
}

impl BackendConfig {
    pub fn new(backend_id: &str, model_name: &str, kind: BackendKind) -> Self {
        BackendConfig {
            backend_id: backend_id.to_string(),
            model_name: model_name.to_string(),
            kind,
            auth_source: None,
            max_in_flight: default_in_flight(),
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
            price_per_1k_chars: None,
            extra_body: BTreeMap::new(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let config: BackendConfig =
            serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.backend_id.trim().is_empty() {
            return Err(BackendError::Config("backend_id is empty".into()));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(BackendError::Config("retry.max_attempts must be at least 1".into()));
        }
        if let BackendKind::MockBiasedOracle(spec) = &self.kind {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// Instantiate the endpoint. Oracle backends look up ground truth in
    /// `records`.
    pub fn build(&self, records: &[PersonRecord]) -> Result<Arc<dyn Backend>, BackendError> {
        self.validate()?;
        Ok(match &self.kind {
            BackendKind::RemoteHttp { endpoint, adapter } => Arc::new(RemoteHttpBackend::new(
                endpoint,
                &self.model_name,
                adapter.clone(),
                self.auth_source.clone(),
                self.timeout(),
                self.extra_body.clone(),
            )),
            BackendKind::LocalSubprocess { program, args } => {
                Arc::new(SubprocessBackend::new(program, args, self.timeout()))
            }
            BackendKind::MockTable { table, entries } => {
                let mut mock = match table {
                    Some(path) => MockTable::load(path)?,
                    None => MockTable::default(),
                };
                for entry in entries {
                    mock.insert_entry(entry.clone());
                }
                Arc::new(mock)
            }
            BackendKind::MockBiasedOracle(spec) => Arc::new(BiasedOracle::new(spec.clone(), records)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_and_validates() {
        let json = r#"{
            "backend_id": "gpt4o",
            "model_name": "gpt-4o",
            "kind": "remote_http",
            "endpoint": "https://example.invalid/v1/chat/completions",
            "adapter": { "preset": "openai_chat" },
            "auth_source": "OPENAI_API_KEY",
            "max_in_flight": 2,
            "retry": { "max_attempts": 5, "backoff_ms": [10, 20] },
            "extra_body": { "temperature": 0 }
        }"#;
        let c: BackendConfig = serde_json::from_str(json).unwrap();
        c.validate().unwrap();
        assert_eq!(c.max_in_flight, 2);
        assert_eq!(c.retry.delay_before_retry(0), Duration::from_millis(10));
        assert_eq!(c.retry.delay_before_retry(7), Duration::from_millis(20));
        let serialized = serde_json::to_string(&c).unwrap();
        assert!(serialized.contains("OPENAI_API_KEY"));

        let mut bad = c.clone();
        bad.max_in_flight = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn transient_classification() {
        assert!(BackendError::Timeout.is_transient());
        assert!(BackendError::UpstreamError {
            status: 503,
            body: String::new()
        }
        .is_transient());
        assert!(!BackendError::UpstreamError {
            status: 400,
            body: String::new()
        }
        .is_transient());
        assert!(!BackendError::AuthMissing("X".into()).is_transient());
    }
}
