//! Instruction prompt templates and rendering.
//!
//! Templates are plain text with square-bracket placeholders (see
//! `assets/templates/README.md`). Rendering is a pure function of the
//! template, the record and the vocabulary.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{ClassVocabulary, Gender, PersonRecord, Race};

pub const FACET_CLASSES: &str = "[FACET Classes]";
pub const FACET_CLASS: &str = "[FACET class]";
pub const GENDER_CLASSES: &str = "[Gender Classes]";
pub const RACE_CLASSES: &str = "[Race Classes]";

/// Options clause that closes every single-choice prompt.
pub const SINGLE_CHOICE_OPTIONS: &str = "Please choose one of the following: A. Yes, B. No, C. Unknown.";

pub const YES: &str = "Yes";
pub const NO: &str = "No";
pub const UNKNOWN: &str = "Unknown";

pub const GENDER_LABELS: [&str; 2] = ["male", "female"];
pub const RACE_LABELS: [&str; 5] = ["white", "black", "asian", "indian", "others"];

const P1: &str = include_str!("../assets/templates/p1.txt");
const P2: &str = include_str!("../assets/templates/p2.txt");
const P3: &str = include_str!("../assets/templates/p3.txt");
const UTK_P1: &str = include_str!("../assets/templates/utk_p1.txt");
const UTK_P2: &str = include_str!("../assets/templates/utk_p2.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unresolved placeholder {0}")]
    UnresolvedPlaceholder(String),
    #[error("class `{0}` is not in the vocabulary")]
    UnknownClassLabel(String),
    #[error("record {0} has no person class")]
    MissingClass(String),
    #[error("template has no candidate labels")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    DirectLabel,
    SingleChoice,
}

pub fn single_choice_options() -> Vec<String> {
    vec![YES.to_string(), NO.to_string(), UNKNOWN.to_string()]
}

/// Which single-choice wording to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleChoiceVariant {
    P2,
    P3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtkAttribute {
    Gender,
    Race,
}

impl std::str::FromStr for UtkAttribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gender" => Ok(UtkAttribute::Gender),
            "race" => Ok(UtkAttribute::Race),
            other => Err(format!("unsupported UTKFace attribute `{other}`")),
        }
    }
}

/// Prompt style of an audit run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    Direct,
    SingleChoice,
    UtkGender,
    UtkRace,
}

impl PromptStyle {
    pub fn name(self) -> &'static str {
        match self {
            PromptStyle::Direct => "direct",
            PromptStyle::SingleChoice => "single-choice",
            PromptStyle::UtkGender => "utk-gender",
            PromptStyle::UtkRace => "utk-race",
        }
    }

    pub fn answer_mode(self) -> AnswerMode {
        match self {
            PromptStyle::SingleChoice => AnswerMode::SingleChoice,
            _ => AnswerMode::DirectLabel,
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PromptStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(PromptStyle::Direct),
            "single-choice" => Ok(PromptStyle::SingleChoice),
            "utk-gender" => Ok(PromptStyle::UtkGender),
            "utk-race" => Ok(PromptStyle::UtkRace),
            other => Err(format!("unknown prompt style `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
    pub answer_mode: AnswerMode,
}

impl PromptTemplate {
    pub fn new(template_id: &str, body: &str, answer_mode: AnswerMode) -> Self {
        PromptTemplate {
            template_id: template_id.to_string(),
            body: body.trim_end_matches(['\r', '\n']).to_string(),
            answer_mode,
        }
    }

    pub fn p1() -> Self {
        PromptTemplate::new("p1", P1, AnswerMode::DirectLabel)
    }

    pub fn p2() -> Self {
        PromptTemplate::new("p2", P2, AnswerMode::SingleChoice)
    }

    pub fn p3() -> Self {
        PromptTemplate::new("p3", P3, AnswerMode::SingleChoice)
    }

    pub fn utk_p1() -> Self {
        PromptTemplate::new("utk_p1", UTK_P1, AnswerMode::DirectLabel)
    }

    pub fn utk_p2() -> Self {
        PromptTemplate::new("utk_p2", UTK_P2, AnswerMode::DirectLabel)
    }

    pub fn builtin(template_id: &str) -> Option<Self> {
        match template_id {
            "p1" => Some(Self::p1()),
            "p2" => Some(Self::p2()),
            "p3" => Some(Self::p3()),
            "utk_p1" => Some(Self::utk_p1()),
            "utk_p2" => Some(Self::utk_p2()),
            _ => None,
        }
    }

    /// Substitute every known placeholder and check nothing bracketed remains.
    pub fn fill(&self, context: &RenderContext<'_>) -> Result<String, PromptError> {
        let mut text = self.body.clone();
        if let Some(classes) = context.classes {
            text = text.replace(FACET_CLASSES, &classes.join(", "));
        }
        if let Some(class) = context.target_class {
            text = text.replace(FACET_CLASS, class);
        }
        text = text
            .replace(GENDER_CLASSES, &GENDER_LABELS.join(", "))
            .replace(RACE_CLASSES, &RACE_LABELS.join(", "));
        match find_placeholder(&text) {
            Some(p) => Err(PromptError::UnresolvedPlaceholder(p)),
            None => Ok(text),
        }
    }
}

/// Values available to placeholders.
#[derive(Debug, Clone, Copy, Default)]
pub struct RenderContext<'a> {
    pub classes: Option<&'a [String]>,
    pub target_class: Option<&'a str>,
}

fn placeholder_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"\[[^\[\]\n]+\]").expect("valid regex"))
}

/// First bracketed placeholder left in `text`, if any.
pub fn find_placeholder(text: &str) -> Option<String> {
    placeholder_pattern().find(text).map(|m| m.as_str().to_string())
}

/// A concrete prompt ready to send.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_id: String,
    pub text: String,
    pub answer_mode: AnswerMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_class: Option<String>,
    pub candidate_labels: Vec<String>,
    pub record_ref: String,
    /// The label a correct answer normalizes to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<String>,
}

impl RenderedPrompt {
    /// Hex SHA-256 of the prompt text.
    pub fn digest(&self) -> String {
        text_digest(&self.text)
    }

    /// The question without the trailing options clause.
    pub fn question(&self) -> &str {
        self.text
            .strip_suffix(SINGLE_CHOICE_OPTIONS)
            .map(str::trim_end)
            .unwrap_or(&self.text)
    }
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Render the direct-question prompt over the full class list.
pub fn render_direct(vocabulary: &ClassVocabulary, record: &PersonRecord) -> Result<RenderedPrompt, PromptError> {
    render_direct_with(&PromptTemplate::p1(), vocabulary, record)
}

pub fn render_direct_with(
    template: &PromptTemplate,
    vocabulary: &ClassVocabulary,
    record: &PersonRecord,
) -> Result<RenderedPrompt, PromptError> {
    let classes = vocabulary.all_classes();
    if classes.is_empty() {
        return Err(PromptError::NoCandidates);
    }
    let text = template.fill(&RenderContext {
        classes: Some(classes),
        target_class: None,
    })?;
    Ok(RenderedPrompt {
        template_id: template.template_id.clone(),
        text,
        answer_mode: AnswerMode::DirectLabel,
        target_class: None,
        candidate_labels: classes.to_vec(),
        record_ref: record.image_id.clone(),
        expected: record.person_class.clone(),
    })
}

/// Render a yes/no/unknown question about `target_class`.
pub fn render_single_choice(
    vocabulary: &ClassVocabulary,
    record: &PersonRecord,
    target_class: &str,
    variant: SingleChoiceVariant,
) -> Result<RenderedPrompt, PromptError> {
    let template = match variant {
        SingleChoiceVariant::P2 => PromptTemplate::p2(),
        SingleChoiceVariant::P3 => PromptTemplate::p3(),
    };
    render_single_choice_with(&template, vocabulary, record, target_class)
}

pub fn render_single_choice_with(
    template: &PromptTemplate,
    vocabulary: &ClassVocabulary,
    record: &PersonRecord,
    target_class: &str,
) -> Result<RenderedPrompt, PromptError> {
    if !vocabulary.contains(target_class) {
        return Err(PromptError::UnknownClassLabel(target_class.to_string()));
    }
    let target = target_class.trim().to_lowercase();
    let text = template.fill(&RenderContext {
        classes: Some(vocabulary.all_classes()),
        target_class: Some(&target),
    })?;
    let positive = record.person_class.as_deref() == Some(target.as_str());
    Ok(RenderedPrompt {
        template_id: template.template_id.clone(),
        text,
        answer_mode: AnswerMode::SingleChoice,
        target_class: Some(target),
        candidate_labels: single_choice_options(),
        record_ref: record.image_id.clone(),
        expected: Some(if positive { YES } else { NO }.to_string()),
    })
}

/// Render the UTKFace attribute-prediction prompt.
pub fn render_utkface(record: &PersonRecord, attribute: UtkAttribute) -> RenderedPrompt {
    let (template, labels, expected): (_, &[&str], _) = match attribute {
        UtkAttribute::Gender => (
            PromptTemplate::utk_p1(),
            &GENDER_LABELS,
            match record.demographics.gender {
                Gender::Male => Some("male"),
                Gender::Female => Some("female"),
                Gender::Unknown => None,
            },
        ),
        UtkAttribute::Race => (
            PromptTemplate::utk_p2(),
            &RACE_LABELS,
            match record.demographics.race {
                Race::White => Some("white"),
                Race::Black => Some("black"),
                Race::Asian => Some("asian"),
                Race::Indian => Some("indian"),
                Race::Others => Some("others"),
                Race::Unknown => None,
            },
        ),
    };
    let text = template
        .fill(&RenderContext::default())
        .expect("built-in UTKFace templates resolve");
    RenderedPrompt {
        template_id: template.template_id,
        text,
        answer_mode: AnswerMode::DirectLabel,
        target_class: None,
        candidate_labels: labels.iter().map(|s| s.to_string()).collect(),
        record_ref: record.image_id.clone(),
        expected: expected.map(str::to_string),
    }
}

/// Render the audit prompt for `record` under `style`. Single-choice audits
/// ask about the record's own class (p2), so every query is a positive.
pub fn render_for_audit(
    style: PromptStyle,
    vocabulary: &ClassVocabulary,
    record: &PersonRecord,
) -> Result<RenderedPrompt, PromptError> {
    match style {
        PromptStyle::Direct => render_direct(vocabulary, record),
        PromptStyle::SingleChoice => {
            let class = record
                .person_class
                .as_deref()
                .ok_or_else(|| PromptError::MissingClass(record.image_id.clone()))?;
            render_single_choice(vocabulary, record, class, SingleChoiceVariant::P2)
        }
        PromptStyle::UtkGender => Ok(render_utkface(record, UtkAttribute::Gender)),
        PromptStyle::UtkRace => Ok(render_utkface(record, UtkAttribute::Race)),
    }
}
