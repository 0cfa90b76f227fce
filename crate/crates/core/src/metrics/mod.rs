//! Recall, group disparity and their aggregates.
//!
//! Recall of group `l` on class `c` is the share of that group's images of
//! class `c` the model got right. The disparity between two groups is the
//! difference of their recalls, so a positive value means the model favours
//! the first group. Images in an `Unknown` bucket never count towards the
//! attribute under analysis.

mod resample;
mod shift;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Attribute, Demographics, Group, PersonRecord};
use crate::prompts::{AnswerMode, YES};

pub use resample::{balanced_resample, ResampleSummary};
pub use shift::{response_shift, ChoiceAnswer, KeyedAnswers, ShiftMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no outcomes for group {group}{}", class.as_ref().map(|c| format!(" in class `{c}`")).unwrap_or_default())]
    EmptyGroup { class: Option<String>, group: String },
    #[error("recalls belong to different classes")]
    MismatchedClass,
    #[error("disparity needs two different groups of one attribute")]
    MismatchedGroups,
    #[error("the Unknown bucket is excluded from analysis")]
    UnknownGroup,
    #[error("group {group} has {available} outcomes, {needed} needed")]
    InsufficientGroupSize {
        group: String,
        available: usize,
        needed: usize,
    },
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("baseline is zero")]
    DivisionByZeroBaseline,
    #[error("image `{0}` is present in only one answer set")]
    KeyMismatch(String),
    #[error("image `{0}` appears twice in one answer set")]
    DuplicateKey(String),
}

/// How per-class recalls combine into an overall recall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Pool all images: sum of correct over sum of total.
    #[default]
    Micro,
    /// Unweighted mean of the per-class recalls.
    Macro,
}

/// One scored model answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub image_id: String,
    /// Ground-truth class (the true attribute label for attribute prompts).
    pub class: String,
    pub demographics: Demographics,
    pub correct: bool,
    #[serde(default)]
    pub normalized_answer: Option<String>,
}

/// Whether a normalized answer is correct. Single-choice queries are all
/// positives, so only an exact Yes counts.
pub fn is_correct(mode: AnswerMode, class: &str, normalized: Option<&str>) -> bool {
    match (mode, normalized) {
        (_, None) => false,
        (AnswerMode::SingleChoice, Some(a)) => a == YES,
        (AnswerMode::DirectLabel, Some(a)) => a.eq_ignore_ascii_case(class),
    }
}

impl Outcome {
    pub fn new(record: &PersonRecord, class: &str, mode: AnswerMode, normalized: Option<String>) -> Self {
        Outcome {
            image_id: record.image_id.clone(),
            class: class.to_string(),
            demographics: record.demographics,
            correct: is_correct(mode, class, normalized.as_deref()),
            normalized_answer: normalized,
        }
    }

    pub fn group(&self, attribute: Attribute) -> Group {
        self.demographics.group(attribute)
    }
}

/// Correct and total counts for one (class, group) cell. `class` is `None`
/// for the overall cell of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCell {
    pub class: Option<String>,
    pub group: String,
    pub n: usize,
    pub k: usize,
    pub recall: f64,
}

impl RecallCell {
    fn from_counts(class: Option<String>, group: Group, k: usize, n: usize) -> Result<Self, MetricsError> {
        if n == 0 {
            return Err(MetricsError::EmptyGroup {
                class,
                group: group.label().to_string(),
            });
        }
        Ok(RecallCell {
            class,
            group: group.label().to_string(),
            n,
            k,
            recall: k as f64 / n as f64,
        })
    }
}

fn counts<'a>(outcomes: impl Iterator<Item = &'a Outcome>) -> (usize, usize) {
    outcomes.fold((0, 0), |(k, n), o| (k + usize::from(o.correct), n + 1))
}

fn check_known(group: Group) -> Result<(), MetricsError> {
    if group.is_unknown() {
        Err(MetricsError::UnknownGroup)
    } else {
        Ok(())
    }
}

/// Recall of `group` on `class`.
pub fn recall(outcomes: &[Outcome], class: &str, group: Group) -> Result<RecallCell, MetricsError> {
    check_known(group)?;
    let attribute = group.attribute();
    let (k, n) = counts(
        outcomes
            .iter()
            .filter(|o| o.class == class && o.group(attribute) == group),
    );
    RecallCell::from_counts(Some(class.to_string()), group, k, n)
}

/// Pooled recall of `group` over every class.
pub fn overall_recall(outcomes: &[Outcome], group: Group) -> Result<RecallCell, MetricsError> {
    check_known(group)?;
    let attribute = group.attribute();
    let (k, n) = counts(outcomes.iter().filter(|o| o.group(attribute) == group));
    RecallCell::from_counts(None, group, k, n)
}

/// Overall recall under either aggregation. Macro averages over the classes
/// where the group has at least one image.
pub fn overall_recall_with(outcomes: &[Outcome], group: Group, aggregation: Aggregation) -> Result<f64, MetricsError> {
    let pooled = overall_recall(outcomes, group)?;
    match aggregation {
        Aggregation::Micro => Ok(pooled.recall),
        Aggregation::Macro => {
            let cells: Vec<f64> = classes(outcomes)
                .iter()
                .filter_map(|c| recall(outcomes, c, group).ok())
                .map(|cell| cell.recall)
                .collect();
            Ok(cells.iter().sum::<f64>() / cells.len() as f64)
        }
    }
}

/// Distinct classes in first-seen order.
pub fn classes(outcomes: &[Outcome]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    outcomes
        .iter()
        .filter(|o| seen.insert(o.class.as_str()))
        .map(|o| o.class.clone())
        .collect()
}

/// Recall difference `r1 - r2`; positive favours the first group.
pub fn disparity(r1: &RecallCell, r2: &RecallCell) -> Result<f64, MetricsError> {
    if r1.class != r2.class {
        return Err(MetricsError::MismatchedClass);
    }
    if r1.group == r2.group {
        return Err(MetricsError::MismatchedGroups);
    }
    Ok(r1.recall - r2.recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDisparity {
    pub class: String,
    /// Absent when either group has no image of this class.
    pub first: Option<RecallCell>,
    pub second: Option<RecallCell>,
    pub gd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    pub attribute: Attribute,
    pub pair: (String, String),
    pub aggregation: Aggregation,
    pub per_class: Vec<ClassDisparity>,
    pub first_overall: RecallCell,
    pub second_overall: RecallCell,
    /// Overall recalls under the chosen aggregation.
    pub first_recall: f64,
    pub second_recall: f64,
    pub overall_gd: f64,
}

/// Per-class and overall disparity between two groups of one attribute.
pub fn disparity_report(
    outcomes: &[Outcome],
    first: Group,
    second: Group,
    aggregation: Aggregation,
) -> Result<DisparityReport, MetricsError> {
    if first.attribute() != second.attribute() || first == second {
        return Err(MetricsError::MismatchedGroups);
    }
    let per_class = classes(outcomes)
        .into_iter()
        .map(|class| {
            let a = recall(outcomes, &class, first).ok();
            let b = recall(outcomes, &class, second).ok();
            let gd = match (&a, &b) {
                (Some(a), Some(b)) => disparity(a, b).ok(),
                _ => None,
            };
            ClassDisparity {
                class,
                first: a,
                second: b,
                gd,
            }
        })
        .collect();
    let first_recall = overall_recall_with(outcomes, first, aggregation)?;
    let second_recall = overall_recall_with(outcomes, second, aggregation)?;
    Ok(DisparityReport {
        attribute: first.attribute(),
        pair: (first.label().to_string(), second.label().to_string()),
        aggregation,
        per_class,
        first_overall: overall_recall(outcomes, first)?,
        second_overall: overall_recall(outcomes, second)?,
        first_recall,
        second_recall,
        overall_gd: first_recall - second_recall,
    })
}

/// Every known (class, group) cell of an attribute plus the per-group
/// overall cells; empty cells are left out.
pub fn recall_table(outcomes: &[Outcome], attribute: Attribute) -> Vec<RecallCell> {
    let groups: Vec<Group> = attribute.groups().into_iter().filter(|g| !g.is_unknown()).collect();
    let mut cells = Vec::new();
    for class in classes(outcomes) {
        cells.extend(groups.iter().filter_map(|&g| recall(outcomes, &class, g).ok()));
    }
    cells.extend(groups.iter().filter_map(|&g| overall_recall(outcomes, g).ok()));
    cells
}

/// Relative change in percent: `100 * (mitigated - raw) / raw`. For a
/// disparity a negative value is an improvement.
pub fn improvement_pct(raw: f64, mitigated: f64) -> Result<f64, MetricsError> {
    if raw == 0.0 {
        return Err(MetricsError::DivisionByZeroBaseline);
    }
    Ok(100.0 * (mitigated - raw) / raw)
}
