//! One audit pass: render a prompt per record, query, normalize, score.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendConfig, BatchStats, Dispatcher, Job};
use crate::dataset::{ClassVocabulary, Dataset, PersonRecord};
use crate::encoder::{Encoder, MatchMethod, Policy};
use crate::metrics::{is_correct, ChoiceAnswer, KeyedAnswers, Outcome};
use crate::mitigation::RationaleBundle;
use crate::prompts::{render_for_audit, single_choice_options, AnswerMode, PromptStyle, RenderedPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStage {
    Render,
    Query,
    Normalize,
}

/// A record that could not be scored, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFailure {
    pub image_id: String,
    pub stage: FailureStage,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub image_id: String,
    pub template_id: String,
    pub prompt_digest: String,
    pub class: String,
    pub raw_text: String,
    pub normalized: Option<String>,
    pub method: MatchMethod,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub low_confidence: bool,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRun {
    pub style: PromptStyle,
    pub items: Vec<ScoredItem>,
    pub outcomes: Vec<Outcome>,
    pub failures: Vec<AuditFailure>,
    /// Cache traffic of this run only; not serialized, so a warm rerun
    /// writes the same file.
    #[serde(skip)]
    pub stats: BatchStats,
}

/// The label a correct answer is scored against: the occupation for Facet
/// prompts, the true attribute label for attribute prompts.
pub fn scoring_class(style: PromptStyle, record: &PersonRecord, prompt: &RenderedPrompt) -> String {
    let class = match style {
        PromptStyle::Direct | PromptStyle::SingleChoice => record.person_class.clone(),
        PromptStyle::UtkGender | PromptStyle::UtkRace => prompt.expected.clone(),
    };
    class.unwrap_or_else(|| "unknown".into())
}

/// Render the audit prompt for every record.
pub fn render_all<'a>(
    dataset: &'a Dataset,
    vocabulary: &ClassVocabulary,
    style: PromptStyle,
) -> (Vec<(&'a PersonRecord, RenderedPrompt)>, Vec<AuditFailure>) {
    let mut rendered = Vec::new();
    let mut failures = Vec::new();
    for record in &dataset.records {
        match render_for_audit(style, vocabulary, record) {
            Ok(p) => rendered.push((record, p)),
            Err(e) => failures.push(AuditFailure {
                image_id: record.image_id.clone(),
                stage: FailureStage::Render,
                error: e.to_string(),
            }),
        }
    }
    (rendered, failures)
}

pub fn run_audit(
    dataset: &Dataset,
    vocabulary: &ClassVocabulary,
    dispatcher: &Dispatcher,
    encoder: &Encoder,
    style: PromptStyle,
    policy: Policy,
) -> AuditRun {
    let (rendered, mut failures) = render_all(dataset, vocabulary, style);
    let jobs: Vec<Job> = rendered.iter().map(|(r, p)| Job::for_prompt(r, p)).collect();
    let (responses, stats) = dispatcher.query_batch(&jobs);
    let mut items = Vec::new();
    let mut outcomes = Vec::new();
    for ((record, prompt), response) in rendered.iter().zip(responses) {
        let response = match response {
            Ok(r) => r,
            Err(e) => {
                failures.push(AuditFailure {
                    image_id: record.image_id.clone(),
                    stage: FailureStage::Query,
                    error: e.to_string(),
                });
                continue;
            }
        };
        let matched = match encoder.normalize(&response.text, &prompt.candidate_labels, policy) {
            Ok(m) => m,
            Err(e) => {
                failures.push(AuditFailure {
                    image_id: record.image_id.clone(),
                    stage: FailureStage::Normalize,
                    error: e.to_string(),
                });
                continue;
            }
        };
        let class = scoring_class(style, record, prompt);
        let outcome = Outcome::new(record, &class, prompt.answer_mode, matched.label.clone());
        items.push(ScoredItem {
            image_id: record.image_id.clone(),
            template_id: prompt.template_id.clone(),
            prompt_digest: response.prompt_digest,
            class,
            raw_text: response.text,
            normalized: matched.label,
            method: matched.method,
            low_confidence: matched.low_confidence,
            correct: outcome.correct,
        });
        outcomes.push(outcome);
    }
    AuditRun {
        style,
        items,
        outcomes,
        failures,
        stats,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DryRunEstimate {
    pub prompts: usize,
    pub prompt_chars: usize,
    pub render_failures: usize,
    /// `None` when the backend has no price configured.
    pub estimated_cost: Option<f64>,
}

/// Render everything and price it without sending anything.
pub fn dry_run(
    dataset: &Dataset,
    vocabulary: &ClassVocabulary,
    style: PromptStyle,
    config: &BackendConfig,
) -> DryRunEstimate {
    let (rendered, failures) = render_all(dataset, vocabulary, style);
    let prompt_chars = rendered.iter().map(|(_, p)| p.text.chars().count()).sum();
    DryRunEstimate {
        prompts: rendered.len(),
        prompt_chars,
        render_failures: failures.len(),
        estimated_cost: config
            .price_per_1k_chars
            .map(|price| price * prompt_chars as f64 / 1000.0),
    }
}

/// Raw and mitigated outcomes of a set of bundles, matched to their records
/// by image id. Bundles without a record are skipped.
pub fn bundle_outcomes(records: &[PersonRecord], bundles: &[RationaleBundle]) -> (Vec<Outcome>, Vec<Outcome>) {
    let by_id: std::collections::HashMap<&str, &PersonRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut raw = Vec::new();
    let mut mitigated = Vec::new();
    for b in bundles {
        let Some(record) = by_id.get(b.image_id.as_str()) else {
            continue;
        };
        let class = record.person_class.clone().unwrap_or_default();
        let mode = if b.options == single_choice_options() {
            AnswerMode::SingleChoice
        } else {
            AnswerMode::DirectLabel
        };
        raw.push(Outcome::new(record, &class, mode, b.raw_answer.clone()));
        mitigated.push(Outcome::new(record, &class, mode, b.final_answer.clone()));
    }
    (raw, mitigated)
}

/// (image id, answer) pairs before and after mitigation.
pub fn bundle_answers(bundles: &[RationaleBundle]) -> (KeyedAnswers, KeyedAnswers) {
    bundles
        .iter()
        .map(|b| {
            (
                (b.image_id.clone(), ChoiceAnswer::from_label(b.raw_answer.as_deref())),
                (b.image_id.clone(), ChoiceAnswer::from_label(b.final_answer.as_deref())),
            )
        })
        .unzip()
}

/// Single-choice correctness of an arbitrary label, exposed for callers
/// that score answers outside an audit run.
pub fn single_choice_correct(answer: Option<&str>) -> bool {
    is_correct(AnswerMode::SingleChoice, "", answer)
}
