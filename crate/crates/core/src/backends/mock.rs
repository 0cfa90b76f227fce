//! Deterministic stand-ins for model endpoints.
//!
//! [`MockTable`] replays scripted answers (and scripted failures).
//! [`BiasedOracle`] answers correctly with a configured probability per
//! (class, group) cell. Its coin flips are a pure function of the seed, the
//! image id and the prompt digest:
//!
//! ```text
//! h = SHA-256("biased-oracle/v1" || seed as 8 little-endian bytes || 0x00
//!             || image_id || 0x00 || prompt_digest)
//! u = (first 8 bytes of h as big-endian u64 >> 11) * 2^-53
//! correct  <=>  u < p
//! ```
//!
//! so any platform, and any independent re-implementation, sees the same
//! outcome stream.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Job};
use crate::dataset::{Attribute, PersonRecord};
use crate::prompts::{text_digest, AnswerMode, NO, UNKNOWN, YES};

const WILDCARD: &str = "*";

/// A scripted failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Timeout,
    RateLimited,
    /// HTTP 503: retried.
    Unavailable,
    /// HTTP 400: not retried.
    BadRequest,
}

impl MockFailure {
    fn to_error(self) -> BackendError {
        match self {
            MockFailure::Timeout => BackendError::Timeout,
            MockFailure::RateLimited => BackendError::RateLimited { attempts: 1 },
            MockFailure::Unavailable => BackendError::UpstreamError {
                status: 503,
                body: "scripted outage".into(),
            },
            MockFailure::BadRequest => BackendError::UpstreamError {
                status: 400,
                body: "scripted rejection".into(),
            },
        }
    }
}

/// One scripted answer. `prompt` is a convenience: its digest is used when
/// `prompt_digest` is absent.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(default = "wildcard")]
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Fail every call with this error, or only the first `fail_times` calls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<MockFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_times: Option<u32>,
    #[serde(default)]
    pub delay_ms: u64,
}

fn wildcard() -> String {
    WILDCARD.to_string()
}

impl MockEntry {
    pub fn answer(image_id: &str, prompt: &str, text: &str) -> Self {
        MockEntry {
            image_id: image_id.to_string(),
            prompt_digest: Some(text_digest(prompt)),
            text: Some(text.to_string()),
            ..MockEntry::default()
        }
    }

    /// Match every image.
    pub fn with_any_image(mut self) -> Self {
        self.image_id = wildcard();
        self
    }

    fn key(&self) -> (String, String) {
        let digest = self
            .prompt_digest
            .clone()
            .or_else(|| self.prompt.as_deref().map(text_digest))
            .unwrap_or_else(wildcard);
        (self.image_id.clone(), digest)
    }
}

/// Scripted answers keyed by (image id, prompt digest). Either side may be
/// `*`. Lookup order: exact, any image, any prompt, both wildcards, then
/// `fallback`.
#[derive(Debug, Default)]
pub struct MockTable {
    entries: HashMap<(String, String), MockEntry>,
    failures_seen: Mutex<HashMap<(String, String), u32>>,
    pub fallback: Option<String>,
}

impl MockTable {
    pub fn new() -> Self {
        MockTable::default()
    }

    /// Load a JSON-lines table; blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let mut table = MockTable::new();
        for (index, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let entry: MockEntry = serde_json::from_str(line)
                .map_err(|e| BackendError::Config(format!("{} line {}: {e}", path.display(), index + 1)))?;
            table.insert_entry(entry);
        }
        Ok(table)
    }

    pub fn insert_entry(&mut self, entry: MockEntry) {
        self.entries.insert(entry.key(), entry);
    }

    pub fn insert(&mut self, image_id: &str, prompt: &str, text: &str) {
        self.insert_entry(MockEntry::answer(image_id, prompt, text));
    }

    pub fn insert_failure(&mut self, image_id: &str, prompt: &str, failure: MockFailure) {
        self.insert_entry(MockEntry {
            image_id: image_id.to_string(),
            prompt_digest: Some(text_digest(prompt)),
            failure: Some(failure),
            ..MockEntry::default()
        });
    }

    pub fn with_fallback(mut self, text: &str) -> Self {
        self.fallback = Some(text.to_string());
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup(&self, image_id: &str, digest: &str) -> Option<&MockEntry> {
        [
            (image_id, digest),
            (WILDCARD, digest),
            (image_id, WILDCARD),
            (WILDCARD, WILDCARD),
        ]
        .iter()
        .find_map(|(i, d)| self.entries.get(&(i.to_string(), d.to_string())))
    }
}

impl Backend for MockTable {
    fn call(&self, job: &Job) -> Result<String, BackendError> {
        let digest = job.prompt_digest();
        let Some(entry) = self.lookup(&job.image_id, &digest) else {
            return self
                .fallback
                .clone()
                .ok_or_else(|| BackendError::Protocol(format!("no mock entry for ({}, {digest})", job.image_id)));
        };
        if entry.delay_ms > 0 {
            thread::sleep(Duration::from_millis(entry.delay_ms));
        }
        if let Some(failure) = entry.failure {
            let mut seen = self.failures_seen.lock().expect("mock lock");
            let count = seen.entry(entry.key()).or_insert(0);
            if entry.fail_times.is_none_or(|n| *count < n) {
                *count += 1;
                return Err(failure.to_error());
            }
        }
        entry
            .text
            .clone()
            .ok_or_else(|| BackendError::Protocol("mock entry has no text".into()))
    }
}

/// Correctness probability for one (class, group) cell. A missing class
/// applies to every class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCell {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub group: String,
    pub p: f64,
}

/// What the oracle says when it decides to be wrong on a single-choice
/// question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongChoice {
    #[default]
    Unknown,
    Negate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedOracleSpec {
    pub seed: u64,
    pub attribute: Attribute,
    #[serde(default)]
    pub cells: Vec<OracleCell>,
    /// Probability for records no cell covers.
    #[serde(default = "default_p")]
    pub default_p: f64,
    #[serde(default)]
    pub wrong_choice: WrongChoice,
}

fn default_p() -> f64 {
    1.0
}

impl BiasedOracleSpec {
    pub fn new(seed: u64, attribute: Attribute) -> Self {
        BiasedOracleSpec {
            seed,
            attribute,
            cells: Vec::new(),
            default_p: default_p(),
            wrong_choice: WrongChoice::default(),
        }
    }

    /// Same probability for every class of `group`.
    pub fn group(mut self, group: &str, p: f64) -> Self {
        self.cells.push(OracleCell {
            class: None,
            group: group.to_string(),
            p,
        });
        self
    }

    pub fn cell(mut self, class: &str, group: &str, p: f64) -> Self {
        self.cells.push(OracleCell {
            class: Some(class.to_string()),
            group: group.to_string(),
            p,
        });
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        if !in_unit(self.default_p) {
            return Err(BackendError::Config(format!(
                "default_p {} outside [0, 1]",
                self.default_p
            )));
        }
        for cell in &self.cells {
            if !in_unit(cell.p) {
                return Err(BackendError::Config(format!("probability {} outside [0, 1]", cell.p)));
            }
            if self.attribute.parse_group(&cell.group).is_none() {
                return Err(BackendError::Config(format!(
                    "`{}` is not a {} group",
                    cell.group, self.attribute
                )));
            }
        }
        Ok(())
    }

    /// Probability that `record` is answered correctly. Class-specific cells
    /// beat group-wide ones.
    pub fn probability(&self, record: &PersonRecord) -> f64 {
        let group = record.group(self.attribute);
        let class = record.person_class.as_deref();
        let matches_group = |c: &&OracleCell| self.attribute.parse_group(&c.group) == Some(group);
        self.cells
            .iter()
            .filter(matches_group)
            .find(|c| c.class.is_some() && c.class.as_deref().map(str::to_lowercase).as_deref() == class)
            .or_else(|| self.cells.iter().filter(matches_group).find(|c| c.class.is_none()))
            .map_or(self.default_p, |c| c.p)
    }

    /// The uniform draw in [0, 1) for one query.
    pub fn draw(&self, image_id: &str, prompt_digest: &str) -> f64 {
        let mut hasher = Sha256::new();
        hasher.update(b"biased-oracle/v1");
        hasher.update(self.seed.to_le_bytes());
        hasher.update([0u8]);
        hasher.update(image_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(prompt_digest.as_bytes());
        let hash = hasher.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&hash[..8]);
        (u64::from_be_bytes(head) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// An oracle with the same accuracy for every group.
pub fn oracle_uniform(seed: u64, attribute: Attribute, p: f64) -> BiasedOracleSpec {
    BiasedOracleSpec {
        default_p: p,
        ..BiasedOracleSpec::new(seed, attribute)
    }
}

/// Answers like a model whose accuracy depends on who is in the picture.
#[derive(Debug)]
pub struct BiasedOracle {
    spec: BiasedOracleSpec,
    probability: HashMap<String, f64>,
}

impl BiasedOracle {
    pub fn new(spec: BiasedOracleSpec, records: &[PersonRecord]) -> Result<Self, BackendError> {
        spec.validate()?;
        let probability = records
            .iter()
            .map(|r| (r.image_id.clone(), spec.probability(r)))
            .collect();
        Ok(BiasedOracle { spec, probability })
    }

    pub fn spec(&self) -> &BiasedOracleSpec {
        &self.spec
    }

    pub fn is_correct(&self, image_id: &str, prompt_digest: &str) -> Result<bool, BackendError> {
        let p = self
            .probability
            .get(image_id)
            .ok_or_else(|| BackendError::Protocol(format!("oracle knows no image `{image_id}`")))?;
        Ok(self.spec.draw(image_id, prompt_digest) < *p)
    }
}

fn choice_text(label: &str) -> String {
    let letter = match label {
        YES => "A",
        NO => "B",
        _ => "C",
    };
    format!("{letter}. {label}")
}

impl Backend for BiasedOracle {
    fn call(&self, job: &Job) -> Result<String, BackendError> {
        let context = job
            .context
            .as_ref()
            .ok_or_else(|| BackendError::Protocol("oracle needs the prompt context".into()))?;
        let correct = self.is_correct(&job.image_id, &job.prompt_digest())?;
        let Some(expected) = context.expected.as_deref() else {
            return Ok("I cannot tell.".into());
        };
        Ok(match context.answer_mode {
            AnswerMode::SingleChoice => {
                let label = match (correct, self.spec.wrong_choice) {
                    (true, _) => expected,
                    (false, WrongChoice::Unknown) => UNKNOWN,
                    (false, WrongChoice::Negate) if expected == YES => NO,
                    (false, WrongChoice::Negate) => YES,
                };
                choice_text(label)
            }
            AnswerMode::DirectLabel => {
                let labels = &context.candidate_labels;
                let label = if correct {
                    expected.to_string()
                } else {
                    let at = labels.iter().position(|l| l == expected).unwrap_or(0);
                    labels
                        .iter()
                        .cycle()
                        .skip(at + 1)
                        .take(labels.len())
                        .find(|l| *l != expected)
                        .cloned()
                        .unwrap_or_else(|| "none".to_string())
                };
                format!("\"{label}\"")
            }
        })
    }
}
