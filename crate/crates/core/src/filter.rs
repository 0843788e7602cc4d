//! Parsing of numbered LLM responses and rule-based caption filtering.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("min_words ({min}) exceeds max_words ({max})")]
    WordBounds { min: usize, max: usize },
    #[error("max_words, min_words and max_accepted must be at least 1")]
    ZeroBound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub max_words: usize,
    pub min_words: usize,
    pub banned_words: Vec<String>,
    pub failure_token: String,
    pub max_accepted: usize,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            max_words: 20,
            min_words: 3,
            banned_words: vec!["heard".to_string()],
            failure_token: "Failure".to_string(),
            max_accepted: 4,
        }
    }
}

impl FilterRules {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.max_words == 0 || self.min_words == 0 || self.max_accepted == 0 {
            return Err(FilterError::ZeroBound);
        }
        if self.min_words > self.max_words {
            return Err(FilterError::WordBounds {
                min: self.min_words,
                max: self.max_words,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Duplicate,
    Failure,
    BannedWord,
    TooLong,
    TooShort,
    Empty,
    Overflow,
}

impl RejectReason {
    pub const ALL: [RejectReason; 7] = [
        RejectReason::Duplicate,
        RejectReason::Failure,
        RejectReason::BannedWord,
        RejectReason::TooLong,
        RejectReason::TooShort,
        RejectReason::Empty,
        RejectReason::Overflow,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub caption: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub accepted: Vec<String>,
    pub rejected: Vec<Rejection>,
}

impl FilterReport {
    pub fn reasons(&self) -> Vec<RejectReason> {
        self.rejected.iter().map(|r| r.reason).collect()
    }

    pub fn histogram(&self) -> BTreeMap<RejectReason, usize> {
        let mut hist = BTreeMap::new();
        for r in &self.rejected {
            *hist.entry(r.reason).or_insert(0) += 1;
        }
        hist
    }
}

/// Strips one leading enumeration marker, returning the remainder if a
/// marker was found.
fn strip_marker(line: &str) -> Option<&str> {
    let mut chars = line.char_indices();
    let (_, first) = chars.next()?;

    // circled digits one through twenty
    if ('\u{2460}'..='\u{2473}').contains(&first) || first == '\u{2022}' {
        return Some(&line[first.len_utf8()..]);
    }
    if first == '-' {
        let rest = &line[1..];
        return rest.starts_with(char::is_whitespace).then_some(rest);
    }
    if first == '(' {
        let rest = &line[1..];
        let digits = rest.len() - rest.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits > 0 && rest[digits..].starts_with(')') {
            return Some(&rest[digits + 1..]);
        }
        return None;
    }
    if first.is_ascii_digit() {
        let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        let rest = &line[digits..];
        if let Some(after) = rest.strip_prefix(')') {
            return Some(after);
        }
        if let Some(after) = rest.strip_prefix('.') {
            // "1.5 seconds" is a number, not a marker
            if !after.starts_with(|c: char| c.is_ascii_digit()) {
                return Some(after);
            }
        }
    }
    None
}

/// Splits a raw response into candidate captions, removing enumeration
/// markers. Lines without a marker are kept as they are.
pub fn parse_numbered(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|line| !line.is_empty())
        .map(|line| strip_marker(line).map(str::trim).unwrap_or(line))
        .filter(|line| !line.is_empty())
        .map(str::to_string)
        .collect()
}

/// Dedup key: lowercase, punctuation removed, whitespace collapsed.
pub fn normalize(caption: &str) -> String {
    let stripped: String = caption
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn word_token(word: &str) -> String {
    word.chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric())
        .collect()
}

pub fn word_count(caption: &str) -> usize {
    caption.split_whitespace().count()
}

struct CompiledRules<'a> {
    rules: &'a FilterRules,
    failure_key: String,
    banned: HashSet<String>,
}

impl<'a> CompiledRules<'a> {
    fn new(rules: &'a FilterRules) -> Self {
        CompiledRules {
            rules,
            failure_key: normalize(&rules.failure_token),
            banned: rules.banned_words.iter().map(|w| word_token(w)).collect(),
        }
    }

    /// Checks that depend only on the caption itself.
    fn intrinsic(&self, caption: &str, key: &str) -> Option<RejectReason> {
        if !self.failure_key.is_empty() && key.starts_with(&self.failure_key) {
            return Some(RejectReason::Failure);
        }
        if caption
            .split_whitespace()
            .any(|w| self.banned.contains(&word_token(w)))
        {
            return Some(RejectReason::BannedWord);
        }
        let words = word_count(caption);
        if words > self.rules.max_words {
            return Some(RejectReason::TooLong);
        }
        if words < self.rules.min_words {
            return Some(RejectReason::TooShort);
        }
        if key.is_empty() {
            return Some(RejectReason::Empty);
        }
        None
    }
}

/// Applies the rules in input order. Reasons are checked in a fixed
/// order: failure, banned word, length, empty, duplicate, overflow.
pub fn filter(candidates: &[String], rules: &FilterRules) -> FilterReport {
    let compiled = CompiledRules::new(rules);
    let mut seen = HashSet::new();
    let mut report = FilterReport::default();

    for caption in candidates {
        let key = normalize(caption);
        let reason = compiled.intrinsic(caption, &key).or_else(|| {
            if seen.contains(&key) {
                Some(RejectReason::Duplicate)
            } else if report.accepted.len() >= rules.max_accepted {
                Some(RejectReason::Overflow)
            } else {
                None
            }
        });
        match reason {
            Some(reason) => report.rejected.push(Rejection {
                caption: caption.clone(),
                reason,
            }),
            None => {
                seen.insert(key);
                report.accepted.push(caption.clone());
            }
        }
    }
    report
}
