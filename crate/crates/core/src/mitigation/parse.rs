use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::MitigationError;
use crate::encoder::{Encoder, Policy};
use crate::prompts::UNKNOWN;

pub const UNCERTAIN: &str = "Uncertain";

/// A sub-answer: text, or the explicit "Uncertain" marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum SubAnswer {
    Answered(String),
    Uncertain,
}

impl SubAnswer {
    pub fn from_text(text: &str) -> Self {
        if is_uncertain(text) {
            SubAnswer::Uncertain
        } else {
            SubAnswer::Answered(text.to_string())
        }
    }

    pub fn text(&self) -> &str {
        match self {
            SubAnswer::Answered(t) => t,
            SubAnswer::Uncertain => UNCERTAIN,
        }
    }

    pub fn is_uncertain(&self) -> bool {
        matches!(self, SubAnswer::Uncertain)
    }
}

fn is_uncertain(text: &str) -> bool {
    text.trim()
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace() || "“”‘’".contains(c))
        .eq_ignore_ascii_case(UNCERTAIN)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRationale {
    pub sub_questions: Vec<String>,
    pub sub_answers: Vec<SubAnswer>,
    /// The trailing `Answer:` token, verbatim.
    pub provisional_answer: Option<String>,
    /// Answer count differed from question count; answers were padded with
    /// Uncertain or cut to fit.
    pub length_mismatch: bool,
}

fn questions_header() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| Regex::new(r"(?i)sub-?\s?questions?\s*:\s*(.*)$").unwrap())
}

fn answers_header() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| Regex::new(r"(?i)sub-?\s?answers?\s*:\s*(.*)$").unwrap())
}

fn answer_line() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| Regex::new(r"(?i)^[\W_]*(?:final\s+)?answers?\s*[*]*\s*:\s*(.*?)\s*$").unwrap())
}

fn item_marker() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| Regex::new(r"^\s*(?:\d+\s*[.):]|[-*•])\s*").unwrap())
}

fn clean_item(line: &str) -> String {
    item_marker().replace(line, "").trim().to_string()
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Preamble,
    Questions,
    Answers,
    Done,
}

/// Pull sub-questions, sub-answers and the provisional answer out of a
/// rationale-generation reply. Numbering, bullets and blank lines are
/// optional.
pub fn parse_rationale(text: &str) -> Result<ParsedRationale, MitigationError> {
    let mut section = Section::Preamble;
    let mut questions = Vec::new();
    let mut answers = Vec::new();
    let mut provisional = None;
    let mut push = |section: Section, item: &str| {
        let item = clean_item(item);
        if item.is_empty() {
            return;
        }
        match section {
            Section::Questions => questions.push(item),
            Section::Answers => answers.push(SubAnswer::from_text(&item)),
            _ => {}
        }
    };
    for line in text.lines() {
        if let Some(caps) = answers_header().captures(line) {
            section = Section::Answers;
            push(section, &caps[1]);
        } else if let Some(caps) = questions_header().captures(line) {
            section = Section::Questions;
            push(section, &caps[1]);
        } else if let Some(caps) = answer_line().captures(line) {
            if section != Section::Preamble {
                provisional = Some(caps[1].to_string()).filter(|a| !a.is_empty());
                section = Section::Done;
            }
        } else {
            push(section, line);
        }
    }
    if questions.is_empty() {
        return Err(MitigationError::UnparseableRationale);
    }
    let length_mismatch = answers.len() != questions.len();
    answers.resize(questions.len(), SubAnswer::Uncertain);
    Ok(ParsedRationale {
        sub_questions: questions,
        sub_answers: answers,
        provisional_answer: provisional,
        length_mismatch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalParse {
    pub rationale: Option<String>,
    /// One of the options, or `None` when nothing matched.
    pub answer: Option<String>,
    /// No answer line was found and the whole text was normalized instead.
    pub missing_answer: bool,
}

fn rationale_block() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| {
        Regex::new(r"(?is)rationale\s*:\s*(.*?)\s*(?:\n[\W_]*(?:final\s+)?answers?\s*[*]*\s*:|\z)").unwrap()
    })
}

/// Map an answer token onto the options. "Uncertain" becomes Unknown when
/// Unknown is an option.
fn map_token(token: &str, options: &[String], encoder: &Encoder, policy: Policy) -> Option<String> {
    if is_uncertain(token) {
        return options.iter().find(|o| o.as_str() == UNKNOWN).cloned();
    }
    encoder.normalize(token, options, policy).ok().and_then(|m| m.label)
}

/// Split a teacher-prompt reply into its rationale and its answer.
pub fn parse_final(text: &str, options: &[String], encoder: &Encoder, policy: Policy) -> FinalParse {
    let rationale = rationale_block()
        .captures(text)
        .map(|c| c[1].trim().to_string())
        .filter(|r| !r.is_empty());
    let token = text
        .lines()
        .filter_map(|l| answer_line().captures(l))
        .next_back()
        .map(|c| c[1].to_string())
        .filter(|t| !t.is_empty());
    match token {
        Some(token) => FinalParse {
            rationale,
            answer: map_token(&token, options, encoder, policy),
            missing_answer: false,
        },
        None => {
            let fallback = if encoder.has_provider() {
                Policy::EmbeddingOnly
            } else {
                Policy::RegexOnly
            };
            FinalParse {
                rationale,
                answer: encoder.normalize(text, options, fallback).ok().and_then(|m| m.label),
                missing_answer: true,
            }
        }
    }
}

/// Map a rationale-stage provisional answer onto the options.
pub fn map_provisional(token: &str, options: &[String]) -> Option<String> {
    map_token(token, options, &Encoder::regex_only(), Policy::RegexOnly)
}
