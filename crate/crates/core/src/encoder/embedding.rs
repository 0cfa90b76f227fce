//! Text embedding providers.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::EncoderError;

/// A source of fixed-dimension text embeddings.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Longest input, in characters, embedded without truncation.
    fn max_chars(&self) -> usize {
        4096
    }

    /// Embed each text. Empty strings map to the zero vector.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EncoderError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    /// The input exceeded the provider's `max_chars` and only its first
    /// segment was embedded.
    pub truncated: bool,
}

fn prepare(provider: &dyn EmbeddingProvider, text: &str) -> Result<(String, bool), EncoderError> {
    if text.trim().is_empty() {
        return Err(EncoderError::EmptyText);
    }
    let max = provider.max_chars();
    if text.chars().count() > max {
        Ok((text.chars().take(max).collect(), true))
    } else {
        Ok((text.to_string(), false))
    }
}

/// Embed one nonempty text.
pub fn embed(provider: &dyn EmbeddingProvider, text: &str) -> Result<Embedding, EncoderError> {
    let (input, truncated) = prepare(provider, text)?;
    let mut vectors = provider.embed_batch(&[input.as_str()])?;
    let vector = vectors
        .pop()
        .ok_or_else(|| EncoderError::ProviderUnavailable("provider returned no vector".into()))?;
    if vector.len() != provider.dimension() {
        return Err(EncoderError::DimensionMismatch {
            expected: provider.dimension(),
            got: vector.len(),
        });
    }
    Ok(Embedding { vector, truncated })
}

/// Embed several nonempty texts in one provider call.
pub fn embed_many(provider: &dyn EmbeddingProvider, texts: &[&str]) -> Result<Vec<Embedding>, EncoderError> {
    let prepared = texts
        .iter()
        .map(|t| prepare(provider, t))
        .collect::<Result<Vec<_>, _>>()?;
    let inputs: Vec<&str> = prepared.iter().map(|(s, _)| s.as_str()).collect();
    let vectors = provider.embed_batch(&inputs)?;
    if vectors.len() != texts.len() {
        return Err(EncoderError::ProviderUnavailable(format!(
            "expected {} vectors, got {}",
            texts.len(),
            vectors.len()
        )));
    }
    vectors
        .into_iter()
        .zip(prepared)
        .map(|(vector, (_, truncated))| {
            if vector.len() != provider.dimension() {
                return Err(EncoderError::DimensionMismatch {
                    expected: provider.dimension(),
                    got: vector.len(),
                });
            }
            Ok(Embedding { vector, truncated })
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Dependency-free embedder: hashed character-trigram frequencies.
///
/// The text is lowercased, whitespace runs collapse to one space, and one
/// space pads each end. Every window of three consecutive characters is
/// hashed with 64-bit FNV-1a over its UTF-8 bytes and counted in bucket
/// `hash % dimension`. Identical on every platform.
#[derive(Debug, Clone)]
pub struct BuiltinHashEmbedder {
    dimension: usize,
}

pub const BUILTIN_DIMENSION: usize = 2048;
pub const TRIGRAM: usize = 3;

impl Default for BuiltinHashEmbedder {
    fn default() -> Self {
        BuiltinHashEmbedder {
            dimension: BUILTIN_DIMENSION,
        }
    }
}

impl BuiltinHashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        BuiltinHashEmbedder { dimension }
    }

    /// The padded, case-folded form whose trigrams are counted.
    pub fn canonical_form(text: &str) -> String {
        let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if collapsed.is_empty() {
            return String::new();
        }
        format!(" {} ", collapsed.to_lowercase())
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let chars: Vec<char> = Self::canonical_form(text).chars().collect();
        let mut buf = [0u8; 16];
        for window in chars.windows(TRIGRAM) {
            let mut len = 0;
            for c in window {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            v[(fnv1a(&buf[..len]) % self.dimension as u64) as usize] += 1.0;
        }
        v
    }
}

impl EmbeddingProvider for BuiltinHashEmbedder {
    fn provider_id(&self) -> &str {
        "builtin-trigram-fnv1a"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EncoderError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
    model: &'a str,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
    dimension: usize,
}

#[derive(Debug, Deserialize)]
struct HealthModel {
    id: String,
    dimension: usize,
}

#[derive(Debug, Deserialize)]
struct Health {
    #[serde(default)]
    models: Vec<HealthModel>,
}

/// Client for the embedding sidecar: `POST /embed` with `{texts, model}`
/// returning `{vectors, dimension}`, and `GET /health` listing models.
pub struct RemoteEmbedder {
    base_url: String,
    model: String,
    provider_id: String,
    dimension: usize,
    agent: ureq::Agent,
    memo: Mutex<HashMap<String, Vec<f64>>>,
}

impl std::fmt::Debug for RemoteEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEmbedder")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("dimension", &self.dimension)
            .finish()
    }
}

impl RemoteEmbedder {
    /// Ask the service for its model inventory and bind to `model`.
    pub fn connect(base_url: &str, model: &str, timeout: Duration) -> Result<Self, EncoderError> {
        let base_url = base_url.trim_end_matches('/').trim_end_matches("/embed").to_string();
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let health: Health = agent
            .get(&format!("{base_url}/health"))
            .call()
            .map_err(|e| EncoderError::ProviderUnavailable(e.to_string()))?
            .into_json()
            .map_err(|e| EncoderError::ProviderUnavailable(e.to_string()))?;
        let dimension = health
            .models
            .iter()
            .find(|m| m.id == model)
            .map(|m| m.dimension)
            .ok_or_else(|| EncoderError::ProviderUnavailable(format!("model `{model}` not served at {base_url}")))?;
        Ok(RemoteEmbedder {
            provider_id: format!("remote:{base_url}#{model}"),
            base_url,
            model: model.to_string(),
            dimension,
            agent,
            memo: Mutex::new(HashMap::new()),
        })
    }

    fn fetch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EncoderError> {
        let unavailable = |e: String| EncoderError::ProviderUnavailable(e);
        let response: EmbedResponse = self
            .agent
            .post(&format!("{}/embed", self.base_url))
            .send_json(
                serde_json::to_value(EmbedRequest {
                    texts,
                    model: &self.model,
                })
                .expect("request serializes"),
            )
            .map_err(|e| unavailable(e.to_string()))?
            .into_json()
            .map_err(|e| unavailable(e.to_string()))?;
        if response.vectors.len() != texts.len() {
            return Err(unavailable(format!(
                "sent {} texts, received {} vectors",
                texts.len(),
                response.vectors.len()
            )));
        }
        if response.dimension != self.dimension {
            return Err(EncoderError::DimensionMismatch {
                expected: self.dimension,
                got: response.dimension,
            });
        }
        if let Some(bad) = response.vectors.iter().find(|v| v.len() != self.dimension) {
            return Err(EncoderError::DimensionMismatch {
                expected: self.dimension,
                got: bad.len(),
            });
        }
        Ok(response.vectors)
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EncoderError> {
        let missing: Vec<&str> = {
            let memo = self.memo.lock().expect("memo lock");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .copied()
                .filter(|t| !t.is_empty() && !memo.contains_key(*t) && seen.insert(*t))
                .collect()
        };
        if !missing.is_empty() {
            let fetched = self.fetch(&missing)?;
            let mut memo = self.memo.lock().expect("memo lock");
            for (text, vector) in missing.into_iter().zip(fetched) {
                memo.insert(text.to_string(), vector);
            }
        }
        let memo = self.memo.lock().expect("memo lock");
        Ok(texts
            .iter()
            .map(|t| {
                if t.is_empty() {
                    vec![0.0; self.dimension]
                } else {
                    memo[*t].clone()
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn canonical_form_folds_case_and_space() {
        assert_eq!(
            BuiltinHashEmbedder::canonical_form("  A \t Skateboarder. "),
            " a skateboarder. "
        );
        assert_eq!(BuiltinHashEmbedder::canonical_form(" \n"), "");
    }

    #[test]
    fn trigram_counts_sum_to_window_count() {
        let e = BuiltinHashEmbedder::default();
        let v = e.vector("nurse");
        // " nurse " has 7 chars, so 5 trigrams.
        assert_eq!(v.iter().sum::<f64>(), 5.0);
        assert_eq!(e.vector(""), vec![0.0; BUILTIN_DIMENSION]);
    }

    #[test]
    fn embed_rejects_blank_and_truncates_long() {
        let e = BuiltinHashEmbedder::new(64);
        assert!(matches!(embed(&e, "   "), Err(EncoderError::EmptyText)));
        let long = "x".repeat(5000);
        let emb = embed(&e, &long).unwrap();
        assert!(emb.truncated);
        assert_eq!(emb.vector.len(), 64);
        assert!(!embed(&e, "nurse").unwrap().truncated);
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), None);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
    }
}
