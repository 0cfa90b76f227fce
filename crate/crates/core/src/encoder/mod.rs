//! Answer normalization: map free-form model output to one candidate label.
//!
//! Two encoder functions are available. The regex stage looks for quoted
//! labels, `Answer:` lines, option letters and whole-word mentions. The
//! embedding stage embeds the raw output and every candidate and picks the
//! candidate with the highest cosine similarity.

mod embedding;
mod regex_match;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{
    cosine, embed, embed_many, fnv1a, norm, BuiltinHashEmbedder, Embedding, EmbeddingProvider, RemoteEmbedder,
    BUILTIN_DIMENSION, TRIGRAM,
};
pub use regex_match::normalize_regex;

/// Matches whose best score leads the runner-up by less than this are
/// flagged as low confidence (they still count).
pub const LOW_CONFIDENCE_GAP: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("text is empty")]
    EmptyText,
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("zero-norm embedding for `{0}`")]
    DegenerateVector(String),
    #[error("no candidate labels")]
    NoCandidates,
    #[error("candidates `{0}` and `{1}` have identical embeddings")]
    NonInjective(String, String),
    #[error("embedding dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("candidate template must contain `{{label}}`")]
    BadTemplate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    Regex,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    RegexOnly,
    EmbeddingOnly,
    RegexThenEmbedding,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::RegexOnly => "regex",
            Policy::EmbeddingOnly => "embedding",
            Policy::RegexThenEmbedding => "regex-then-embedding",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regex" => Ok(Policy::RegexOnly),
            "embedding" => Ok(Policy::EmbeddingOnly),
            "regex-then-embedding" => Ok(Policy::RegexThenEmbedding),
            other => Err(format!("unknown encoder policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `None` is NoMatch.
    pub label: Option<String>,
    pub method: MatchMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runner_up_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub low_confidence: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl MatchResult {
    pub(crate) fn matched(label: String, method: MatchMethod) -> Self {
        MatchResult {
            label: Some(label),
            method,
            score: None,
            runner_up_gap: None,
            low_confidence: false,
            truncated: false,
        }
    }

    pub(crate) fn no_match(method: MatchMethod) -> Self {
        MatchResult {
            label: None,
            method,
            score: None,
            runner_up_gap: None,
            low_confidence: false,
            truncated: false,
        }
    }

    pub fn is_no_match(&self) -> bool {
        self.label.is_none()
    }

    pub fn label_or_no_match(&self) -> &str {
        self.label.as_deref().unwrap_or("NoMatch")
    }
}

/// Drop byte-identical duplicates, keeping first occurrences in order.
pub fn dedup_candidates(candidates: &[String]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    candidates.iter().filter(|c| seen.insert(c.as_str())).cloned().collect()
}

fn render_candidate(template: Option<&str>, label: &str) -> String {
    match template {
        Some(t) => t.replace("{label}", label),
        None => label.to_string(),
    }
}

/// Argmax of cosine similarity between `raw` and each candidate. Ties go to
/// the lexicographically smallest label.
pub fn normalize_embedding(
    provider: &dyn EmbeddingProvider,
    raw: &str,
    candidates: &[String],
) -> Result<MatchResult, EncoderError> {
    normalize_embedding_with(provider, raw, candidates, None)
}

fn normalize_embedding_with(
    provider: &dyn EmbeddingProvider,
    raw: &str,
    candidates: &[String],
    candidate_template: Option<&str>,
) -> Result<MatchResult, EncoderError> {
    let candidates = dedup_candidates(candidates);
    if candidates.is_empty() {
        return Err(EncoderError::NoCandidates);
    }
    let rendered: Vec<String> = candidates
        .iter()
        .map(|c| render_candidate(candidate_template, c))
        .collect();
    let mut texts: Vec<&str> = vec![raw];
    texts.extend(rendered.iter().map(String::as_str));
    let embeddings = embed_many(provider, &texts)?;
    let (output, labels) = embeddings.split_first().expect("raw text embedded");

    let mut scored = Vec::with_capacity(candidates.len());
    for (label, emb) in candidates.iter().zip(labels) {
        let score = match cosine(&output.vector, &emb.vector) {
            Some(s) => s,
            None if norm(&output.vector) == 0.0 => return Err(EncoderError::DegenerateVector(raw.to_string())),
            None => return Err(EncoderError::DegenerateVector(label.clone())),
        };
        scored.push((label, score));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let (best, score) = scored[0];
    let gap = scored.get(1).map(|(_, s)| score - s);
    Ok(MatchResult {
        label: Some(best.clone()),
        method: MatchMethod::Embedding,
        score: Some(score),
        runner_up_gap: gap,
        low_confidence: gap.is_some_and(|g| g < LOW_CONFIDENCE_GAP),
        truncated: output.truncated,
    })
}

/// Fail if two distinct candidates embed to the same vector.
pub fn check_injective(provider: &dyn EmbeddingProvider, candidates: &[String]) -> Result<(), EncoderError> {
    let candidates = dedup_candidates(candidates);
    let texts: Vec<&str> = candidates.iter().map(String::as_str).collect();
    let embeddings = embed_many(provider, &texts)?;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            if embeddings[i].vector == embeddings[j].vector {
                return Err(EncoderError::NonInjective(candidates[i].clone(), candidates[j].clone()));
            }
        }
    }
    Ok(())
}

/// Normalizer configured with a policy-independent provider handle.
#[derive(Clone)]
pub struct Encoder {
    provider: Option<Arc<dyn EmbeddingProvider>>,
    candidate_template: Option<String>,
}

impl std::fmt::Debug for Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Encoder")
            .field("provider", &self.provider.as_ref().map(|p| p.provider_id().to_string()))
            .field("candidate_template", &self.candidate_template)
            .finish()
    }
}

impl Encoder {
    pub fn regex_only() -> Self {
        Encoder {
            provider: None,
            candidate_template: None,
        }
    }

    pub fn with_provider(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Encoder {
            provider: Some(provider),
            candidate_template: None,
        }
    }

    pub fn builtin() -> Self {
        Encoder::with_provider(Arc::new(BuiltinHashEmbedder::default()))
    }

    /// Wrap candidates in a sentence before embedding, e.g. `a photo of a {label}`.
    pub fn candidate_template(mut self, template: &str) -> Result<Self, EncoderError> {
        if !template.contains("{label}") {
            return Err(EncoderError::BadTemplate);
        }
        self.candidate_template = Some(template.to_string());
        Ok(self)
    }

    pub fn has_provider(&self) -> bool {
        self.provider.is_some()
    }

    pub fn provider_id(&self) -> Option<&str> {
        self.provider.as_deref().map(|p| p.provider_id())
    }

    /// Startup check that the provider separates every candidate set.
    pub fn assert_injective(&self, candidate_sets: &[&[String]]) -> Result<(), EncoderError> {
        let Some(provider) = self.provider.as_deref() else {
            return Ok(());
        };
        for set in candidate_sets {
            let rendered: Vec<String> = set
                .iter()
                .map(|c| render_candidate(self.candidate_template.as_deref(), c))
                .collect();
            check_injective(provider, &rendered)?;
        }
        Ok(())
    }

    pub fn normalize(&self, raw: &str, candidates: &[String], policy: Policy) -> Result<MatchResult, EncoderError> {
        if candidates.is_empty() {
            return Err(EncoderError::NoCandidates);
        }
        let embedding = || -> Result<MatchResult, EncoderError> {
            let provider = self
                .provider
                .as_deref()
                .ok_or_else(|| EncoderError::ProviderUnavailable("no embedding provider configured".into()))?;
            if raw.trim().is_empty() {
                return Ok(MatchResult::no_match(MatchMethod::Embedding));
            }
            normalize_embedding_with(provider, raw, candidates, self.candidate_template.as_deref())
        };
        match policy {
            Policy::RegexOnly => Ok(normalize_regex(raw, candidates)),
            Policy::EmbeddingOnly => embedding(),
            Policy::RegexThenEmbedding => {
                let regex = normalize_regex(raw, candidates);
                if regex.is_no_match() {
                    embedding()
                } else {
                    Ok(regex)
                }
            }
        }
    }
}

/// Normalize a raw answer against the prompt's candidate labels.
pub fn normalize(
    encoder: &Encoder,
    raw: &str,
    prompt: &crate::prompts::RenderedPrompt,
    policy: Policy,
) -> Result<MatchResult, EncoderError> {
    encoder.normalize(raw, &prompt.candidate_labels, policy)
}
