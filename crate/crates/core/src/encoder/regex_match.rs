use std::sync::OnceLock;

use regex::Regex;

use super::{MatchMethod, MatchResult};

fn quoted_pattern() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| Regex::new(r#"["“”]([^"“”\n]{1,80})["“”]"#).unwrap())
}

fn answer_line_pattern() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| Regex::new(r"(?im)^[\s*]*(?:final\s+)?answers?\s*[*]*\s*:\s*(.+?)\s*$").unwrap())
}

fn option_letter_pattern() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| Regex::new(r"^\s*\(?([ABCabc])(?:[.):]|\s*$)").unwrap())
}

/// Case-insensitive whole-word containment.
pub(crate) fn contains_word(haystack: &str, needle: &str) -> bool {
    find_word(haystack, needle).is_some()
}

fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    let hay = haystack.to_lowercase();
    let needle = needle.trim().to_lowercase();
    if needle.is_empty() {
        return None;
    }
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = hay[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after_ok = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return Some(start);
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

fn equals_label(segment: &str, label: &str) -> bool {
    let trimmed = segment
        .trim()
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    trimmed.eq_ignore_ascii_case(label.trim())
}

/// When the candidates are exactly the yes/no/unknown options, map an option
/// letter to its label.
fn option_letter(segment: &str, candidates: &[String]) -> Option<String> {
    let letters = ["yes", "no", "unknown"];
    if candidates.len() != 3 || !candidates.iter().zip(letters).all(|(c, l)| c.eq_ignore_ascii_case(l)) {
        return None;
    }
    let caps = option_letter_pattern().captures(segment)?;
    let index = match caps[1].to_ascii_uppercase().as_str() {
        "A" => 0,
        "B" => 1,
        _ => 2,
    };
    Some(candidates[index].clone())
}

fn first_in_candidate_order(text: &str, candidates: &[String]) -> Option<String> {
    candidates.iter().find(|c| contains_word(text, c)).cloned()
}

fn leading_candidate(text: &str, candidates: &[String]) -> Option<String> {
    let stripped = text.trim_start_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    candidates
        .iter()
        .filter(|c| find_word(stripped, c) == Some(0))
        .max_by_key(|c| c.len())
        .cloned()
}

/// Regular-expression normalization of a raw model answer.
///
/// Stages, first hit wins: a quoted segment equal to a candidate; the last
/// `Answer:` line (option letter, else first candidate in candidate order);
/// a leading option letter; a leading candidate word; finally a whole-word
/// scan where the first candidate in candidate order that occurs anywhere
/// wins.
pub fn normalize_regex(raw: &str, candidates: &[String]) -> MatchResult {
    let hit = |label: String| MatchResult::matched(label, MatchMethod::Regex);

    for caps in quoted_pattern().captures_iter(raw) {
        if let Some(c) = candidates.iter().find(|c| equals_label(&caps[1], c)) {
            return hit(c.clone());
        }
    }
    if let Some(caps) = answer_line_pattern().captures_iter(raw).last() {
        let segment = &caps[1];
        if let Some(label) = option_letter(segment, candidates)
            .or_else(|| leading_candidate(segment, candidates))
            .or_else(|| first_in_candidate_order(segment, candidates))
        {
            return hit(label);
        }
    }
    if let Some(label) = option_letter(raw, candidates) {
        return hit(label);
    }
    if let Some(label) = leading_candidate(raw, candidates) {
        return hit(label);
    }
    match first_in_candidate_order(raw, candidates) {
        Some(label) => hit(label),
        None => MatchResult::no_match(MatchMethod::Regex),
    }
}
