use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::prompts::{NO, UNKNOWN, YES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChoiceAnswer {
    Yes,
    No,
    Unknown,
}

impl ChoiceAnswer {
    pub const ALL: [ChoiceAnswer; 3] = [ChoiceAnswer::Yes, ChoiceAnswer::No, ChoiceAnswer::Unknown];

    /// Map a normalized label; anything unmatched counts as Unknown.
    pub fn from_label(label: Option<&str>) -> Self {
        match label {
            Some(l) if l.eq_ignore_ascii_case(YES) => ChoiceAnswer::Yes,
            Some(l) if l.eq_ignore_ascii_case(NO) => ChoiceAnswer::No,
            _ => ChoiceAnswer::Unknown,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ChoiceAnswer::Yes => YES,
            ChoiceAnswer::No => NO,
            ChoiceAnswer::Unknown => UNKNOWN,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ChoiceAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Transition counts: rows are raw answers, columns the answers after
/// mitigation, both ordered Yes, No, Unknown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ShiftMatrix {
    pub fn get(&self, from: ChoiceAnswer, to: ChoiceAnswer) -> u64 {
        self.counts[from.index()][to.index()]
    }

    pub fn record(&mut self, from: ChoiceAnswer, to: ChoiceAnswer) {
        self.counts[from.index()][to.index()] += 1;
    }

    /// Number of raw answers equal to `from`.
    pub fn row_sum(&self, from: ChoiceAnswer) -> u64 {
        self.counts[from.index()].iter().sum()
    }

    pub fn column_sum(&self, to: ChoiceAnswer) -> u64 {
        self.counts.iter().map(|row| row[to.index()]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..3).all(|i| (0..3).all(|j| i == j || self.counts[i][j] == 0))
    }
}

fn keyed(answers: &[(String, ChoiceAnswer)]) -> Result<BTreeMap<&str, ChoiceAnswer>, MetricsError> {
    let mut map = BTreeMap::new();
    for (key, answer) in answers {
        if map.insert(key.as_str(), *answer).is_some() {
            return Err(MetricsError::DuplicateKey(key.clone()));
        }
    }
    Ok(map)
}

/// Answers keyed by image id.
pub type KeyedAnswers = Vec<(String, ChoiceAnswer)>;

/// Count how answers moved between two runs over the same images.
pub fn response_shift(
    raw: &[(String, ChoiceAnswer)],
    mitigated: &[(String, ChoiceAnswer)],
) -> Result<ShiftMatrix, MetricsError> {
    let before = keyed(raw)?;
    let after = keyed(mitigated)?;
    if let Some(k) = after.keys().find(|k| !before.contains_key(*k)) {
        return Err(MetricsError::KeyMismatch(k.to_string()));
    }
    let mut matrix = ShiftMatrix::default();
    for (key, from) in &before {
        let to = after
            .get(key)
            .ok_or_else(|| MetricsError::KeyMismatch(key.to_string()))?;
        matrix.record(*from, *to);
    }
    Ok(matrix)
}
