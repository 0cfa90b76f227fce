//! Two-stage chain-of-thought mitigation.
//!
//! Stage one asks a rationale generator, without the image, to break the
//! question into sub-questions. The target model then answers each
//! sub-question with the image attached. Stage two sends the original
//! question, the options and those visual answers back to the target model
//! as "preliminary knowledge", again with the image.
//!
//! Every request that was sent is kept in the [`RationaleBundle`], and
//! [`RationaleBundle::rerender`] rebuilds them from the bundle's own fields.

mod archive;
mod parse;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::thread;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Dispatcher, Job};
use crate::dataset::PersonRecord;
use crate::encoder::{Encoder, Policy};
use crate::prompts::RenderedPrompt;

pub use archive::{read_bundles, BundleArchive, BUNDLE_FORMAT, BUNDLE_VERSION};
pub use parse::{map_provisional, parse_final, parse_rationale, FinalParse, ParsedRationale, SubAnswer, UNCERTAIN};

const RATIONALE_TEMPLATE: &str = include_str!("../../assets/templates/rationale.txt");
const TEACHER_TEMPLATE: &str = include_str!("../../assets/templates/teacher.txt");

pub const DEFAULT_MAX_SUB_QUESTIONS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MitigationError {
    #[error("rationale reply has no sub-questions section")]
    UnparseableRationale,
    #[error("no sub-questions to answer")]
    NoSubQuestions,
    #[error("question and answer lists are not aligned ({questions} vs {answers})")]
    Misaligned { questions: usize, answers: usize },
    #[error("mitigation needs at least one option")]
    NoOptions,
}

fn placeholder() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| Regex::new(r"\{(question|options|knowledge)\}").unwrap())
}

/// Substitute all placeholders in one pass so values are never rescanned.
fn fill(template: &str, question: &str, options: &str, knowledge: &str) -> String {
    placeholder()
        .replace_all(template.trim_end_matches('\n'), |c: &regex::Captures<'_>| match &c[1] {
            "question" => question.to_string(),
            "options" => options.to_string(),
            _ => knowledge.to_string(),
        })
        .into_owned()
}

fn quoted_list(options: &[String], quote: char) -> String {
    let items: Vec<String> = options.iter().map(|o| format!("{quote}{o}{quote}")).collect();
    format!("[{}]", items.join(", "))
}

/// The rationale-generation prompt. It is sent without the image.
pub fn build_rationale_prompt(question: &str, options: &[String]) -> String {
    fill(RATIONALE_TEMPLATE, question, &quoted_list(options, '"'), "")
}

/// The teacher prompt: each sub-question followed by its visual answer.
pub fn build_final_prompt(
    question: &str,
    options: &[String],
    sub_questions: &[String],
    visual_sub_answers: &[SubAnswer],
) -> Result<String, MitigationError> {
    if sub_questions.len() != visual_sub_answers.len() {
        return Err(MitigationError::Misaligned {
            questions: sub_questions.len(),
            answers: visual_sub_answers.len(),
        });
    }
    let knowledge: Vec<String> = sub_questions
        .iter()
        .zip(visual_sub_answers)
        .map(|(q, a)| format!("{q}\n{}", a.text()))
        .collect();
    Ok(fill(
        TEACHER_TEMPLATE,
        question,
        &quoted_list(options, '\''),
        &knowledge.join("\n"),
    ))
}

/// A visual sub-answer plus the error that replaced it, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualAnswer {
    pub answer: SubAnswer,
    pub error: Option<String>,
}

/// Ask every sub-question about the image. The requests fan out under the
/// dispatcher's in-flight bound; a failed question becomes Uncertain.
pub fn answer_subquestions(
    target: &Dispatcher,
    record: &PersonRecord,
    sub_questions: &[String],
) -> Result<Vec<VisualAnswer>, MitigationError> {
    if sub_questions.is_empty() {
        return Err(MitigationError::NoSubQuestions);
    }
    let jobs: Vec<Job> = sub_questions
        .iter()
        .map(|q| Job::with_image(&record.image_id, &record.image_path, q))
        .collect();
    let (results, _) = target.query_batch(&jobs);
    Ok(results
        .into_iter()
        .map(|r| match r {
            Ok(response) => VisualAnswer {
                answer: SubAnswer::Answered(response.text),
                error: None,
            },
            Err(e) => VisualAnswer {
                answer: SubAnswer::Uncertain,
                error: Some(e.to_string()),
            },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BundleFlag {
    RawQueryFailed {
        error: String,
    },
    RationaleQueryFailed {
        error: String,
    },
    UnparseableRationale,
    LengthMismatch,
    SubQuestionsTruncated {
        generated: usize,
    },
    SubQuestionFailed {
        index: usize,
        error: String,
    },
    FinalQueryFailed {
        error: String,
    },
    MissingAnswer,
    /// The mitigated answer is the unmitigated one.
    FellBackToRaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Rationale,
    SubQuestion,
    Final,
}

/// One request as it was sent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentRequest {
    pub stage: Stage,
    pub text: String,
    pub with_image: bool,
}

/// Full transcript of one mitigated case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleBundle {
    pub image_id: String,
    pub target_backend: String,
    pub rationale_backend: String,
    pub original_prompt: String,
    pub original_question: String,
    pub options: Vec<String>,
    pub raw_text: Option<String>,
    pub raw_answer: Option<String>,
    pub rationale_text: Option<String>,
    pub sub_questions: Vec<String>,
    /// Generator's own answers, kept for analysis only.
    pub stage1_sub_answers: Vec<SubAnswer>,
    pub provisional_answer: Option<String>,
    pub visual_sub_answers: Vec<SubAnswer>,
    pub final_prompt: Option<String>,
    pub final_text: Option<String>,
    pub final_rationale: Option<String>,
    /// One of `options`, or `None` if neither run produced a usable answer.
    pub final_answer: Option<String>,
    pub flags: Vec<BundleFlag>,
    pub requests: Vec<SentRequest>,
}

impl RationaleBundle {
    pub fn has_flag(&self, pred: impl Fn(&BundleFlag) -> bool) -> bool {
        self.flags.iter().any(pred)
    }

    /// Rebuild every request text from the bundle's fields, in send order.
    pub fn rerender(&self) -> Vec<SentRequest> {
        let mut out = vec![SentRequest {
            stage: Stage::Raw,
            text: self.original_prompt.clone(),
            with_image: true,
        }];
        if self.raw_text.is_none() {
            return out;
        }
        out.push(SentRequest {
            stage: Stage::Rationale,
            text: build_rationale_prompt(&self.original_question, &self.options),
            with_image: false,
        });
        out.extend(self.sub_questions.iter().map(|q| SentRequest {
            stage: Stage::SubQuestion,
            text: q.clone(),
            with_image: true,
        }));
        if !self.sub_questions.is_empty() {
            if let Ok(text) = build_final_prompt(
                &self.original_question,
                &self.options,
                &self.sub_questions,
                &self.visual_sub_answers,
            ) {
                out.push(SentRequest {
                    stage: Stage::Final,
                    text,
                    with_image: true,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationOptions {
    pub max_sub_questions: usize,
    pub policy: Policy,
}

impl Default for MitigationOptions {
    fn default() -> Self {
        MitigationOptions {
            max_sub_questions: DEFAULT_MAX_SUB_QUESTIONS,
            policy: Policy::RegexOnly,
        }
    }
}

fn normalized(encoder: &Encoder, text: &str, options: &[String], policy: Policy) -> Option<String> {
    encoder.normalize(text, options, policy).ok().and_then(|m| m.label)
}

/// Run the whole pipeline for one record. Stage failures never abort: the
/// bundle is returned with flags and, where needed, the raw answer.
pub fn mitigate_case(
    rationale_backend: &Dispatcher,
    target: &Dispatcher,
    record: &PersonRecord,
    prompt: &RenderedPrompt,
    encoder: &Encoder,
    options: &MitigationOptions,
) -> Result<RationaleBundle, MitigationError> {
    let choices = prompt.candidate_labels.clone();
    if choices.is_empty() {
        return Err(MitigationError::NoOptions);
    }
    let question = prompt.question().to_string();
    let mut bundle = RationaleBundle {
        image_id: record.image_id.clone(),
        target_backend: target.config().backend_id.clone(),
        rationale_backend: rationale_backend.config().backend_id.clone(),
        original_prompt: prompt.text.clone(),
        original_question: question.clone(),
        options: choices.clone(),
        raw_text: None,
        raw_answer: None,
        rationale_text: None,
        sub_questions: Vec::new(),
        stage1_sub_answers: Vec::new(),
        provisional_answer: None,
        visual_sub_answers: Vec::new(),
        final_prompt: None,
        final_text: None,
        final_rationale: None,
        final_answer: None,
        flags: Vec::new(),
        requests: Vec::new(),
    };
    let fall_back = |mut b: RationaleBundle| {
        b.final_answer = b.raw_answer.clone();
        b.flags.push(BundleFlag::FellBackToRaw);
        b
    };

    bundle.requests.push(SentRequest {
        stage: Stage::Raw,
        text: prompt.text.clone(),
        with_image: true,
    });
    match target.query(&Job::for_prompt(record, prompt)) {
        Ok(r) => {
            bundle.raw_answer = normalized(encoder, &r.text, &choices, options.policy);
            bundle.raw_text = Some(r.text);
        }
        Err(e) => {
            bundle.flags.push(BundleFlag::RawQueryFailed { error: e.to_string() });
            return Ok(bundle);
        }
    }

    let rationale_prompt = build_rationale_prompt(&question, &choices);
    bundle.requests.push(SentRequest {
        stage: Stage::Rationale,
        text: rationale_prompt.clone(),
        with_image: false,
    });
    let rationale_text = match rationale_backend.query(&Job::text_only(&record.image_id, &rationale_prompt)) {
        Ok(r) => r.text,
        Err(e) => {
            bundle
                .flags
                .push(BundleFlag::RationaleQueryFailed { error: e.to_string() });
            return Ok(fall_back(bundle));
        }
    };
    bundle.rationale_text = Some(rationale_text.clone());
    let parsed = match parse_rationale(&rationale_text) {
        Ok(p) => p,
        Err(_) => {
            bundle.flags.push(BundleFlag::UnparseableRationale);
            return Ok(fall_back(bundle));
        }
    };
    if parsed.length_mismatch {
        bundle.flags.push(BundleFlag::LengthMismatch);
    }
    let generated = parsed.sub_questions.len();
    let keep = generated.min(options.max_sub_questions.max(1));
    if keep < generated {
        bundle.flags.push(BundleFlag::SubQuestionsTruncated { generated });
    }
    bundle.sub_questions = parsed.sub_questions[..keep].to_vec();
    bundle.stage1_sub_answers = parsed.sub_answers[..keep].to_vec();
    bundle.provisional_answer = parsed
        .provisional_answer
        .as_deref()
        .and_then(|t| map_provisional(t, &choices));

    bundle.requests.extend(bundle.sub_questions.iter().map(|q| SentRequest {
        stage: Stage::SubQuestion,
        text: q.clone(),
        with_image: true,
    }));
    let visual = answer_subquestions(target, record, &bundle.sub_questions)?;
    for (index, v) in visual.iter().enumerate() {
        if let Some(error) = &v.error {
            bundle.flags.push(BundleFlag::SubQuestionFailed {
                index,
                error: error.clone(),
            });
        }
    }
    bundle.visual_sub_answers = visual.into_iter().map(|v| v.answer).collect();

    let final_prompt = build_final_prompt(&question, &choices, &bundle.sub_questions, &bundle.visual_sub_answers)?;
    bundle.requests.push(SentRequest {
        stage: Stage::Final,
        text: final_prompt.clone(),
        with_image: true,
    });
    bundle.final_prompt = Some(final_prompt.clone());
    let final_text = match target.query(&Job::with_image(&record.image_id, &record.image_path, &final_prompt)) {
        Ok(r) => r.text,
        Err(e) => {
            bundle.flags.push(BundleFlag::FinalQueryFailed { error: e.to_string() });
            return Ok(fall_back(bundle));
        }
    };
    let parsed = parse_final(&final_text, &choices, encoder, options.policy);
    bundle.final_text = Some(final_text);
    bundle.final_rationale = parsed.rationale;
    if parsed.missing_answer {
        bundle.flags.push(BundleFlag::MissingAnswer);
    }
    bundle.final_answer = parsed.answer;
    Ok(bundle)
}

/// Mitigate many cases concurrently. Results keep input order.
pub fn mitigate_all(
    rationale_backend: &Dispatcher,
    target: &Dispatcher,
    cases: &[(PersonRecord, RenderedPrompt)],
    encoder: &Encoder,
    options: &MitigationOptions,
) -> Vec<Result<RationaleBundle, MitigationError>> {
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::with_capacity(cases.len()));
    let workers = target.config().max_in_flight.min(cases.len()).max(1);
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((record, prompt)) = cases.get(i) else { break };
                let bundle = mitigate_case(rationale_backend, target, record, prompt, encoder, options);
                done.lock().expect("results lock").push((i, bundle));
            });
        }
    });
    let mut done = done.into_inner().expect("results lock");
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, b)| b).collect()
}
