//! Prompt families used to ask an LLM for alternative captions.
//!
//! Stored instructions use two placeholders: `{N}` for the number of
//! captions requested and `{CAPTION}` for the source caption. Templates
//! without a `{CAPTION}` slot get the caption appended on its own line.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const COUNT_PLACEHOLDER: &str = "{N}";
pub const CAPTION_PLACEHOLDER: &str = "{CAPTION}";
pub const DEFAULT_REQUESTED_COUNT: u32 = 4;

const SIMPLE_INSTRUCTION: &str = "Generate unique {N} captions for the following sounds, \
ensuring each description varies distinctly from the others: {CAPTION}";

const MODIFIED_CLOTHO_INSTRUCTION: &str = "Generate {N} captions for the following sounds. \
Use a subject-verb-object grammatical structure, do not use the word 'heard,' do not describe \
the temporal order of the sounds, and ensure that each caption is less than 20 words.";

const MODIFIED_WAVCAPS_INSTRUCTION: &str = "Generate {N} captions for each sound. \
Use a subject-verb-object structure. Remove all references to specific times, locations, \
devices, and named entities\u{2014}replace people names with 'someone.' Summarize sound events \
in no more than 20 words per caption. Avoid using 'heard' or recording' specifics. Start each \
caption with its index and output 'Failure' if the description is not directly about the sound.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown prompt kind `{0}` (expected simple, clotho, wavcaps or custom)")]
    UnknownKind(String),
    #[error("`{0}` has no built-in instruction")]
    NotBuiltin(PromptKind),
    #[error("source caption is empty")]
    EmptyCaption,
    #[error("caption count must be at least 1")]
    ZeroCount,
    #[error("source caption contains a template placeholder")]
    PlaceholderInCaption,
    #[error("built-in instruction must contain {{N}} exactly once, found {0}")]
    CountPlaceholder(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Simple,
    ModifiedClotho,
    #[serde(rename = "modified_wavcaps", alias = "modified_wav_caps")]
    ModifiedWavCaps,
    Custom,
}

impl PromptKind {
    pub const BUILTIN: [PromptKind; 3] = [
        PromptKind::Simple,
        PromptKind::ModifiedClotho,
        PromptKind::ModifiedWavCaps,
    ];

    /// Human-readable label, as used in comparison reports.
    pub fn label(self) -> &'static str {
        match self {
            PromptKind::Simple => "Simple Prompt",
            PromptKind::ModifiedClotho => "Modification of Clotho Prompt",
            PromptKind::ModifiedWavCaps => "Modification of WavCaps Prompt",
            PromptKind::Custom => "Custom Prompt",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PromptKind::Simple => "simple",
            PromptKind::ModifiedClotho => "modified_clotho",
            PromptKind::ModifiedWavCaps => "modified_wavcaps",
            PromptKind::Custom => "custom",
        };
        f.write_str(name)
    }
}

impl FromStr for PromptKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "simple" => Ok(PromptKind::Simple),
            "clotho" | "modified_clotho" => Ok(PromptKind::ModifiedClotho),
            "wavcaps" | "modified_wavcaps" => Ok(PromptKind::ModifiedWavCaps),
            "custom" => Ok(PromptKind::Custom),
            _ => Err(PromptError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub instruction_text: String,
    #[serde(default = "default_requested_count")]
    pub requested_count: u32,
}

fn default_requested_count() -> u32 {
    DEFAULT_REQUESTED_COUNT
}

/// Returns one of the three built-in prompt families with a default
/// request of four captions.
pub fn builtin_template(kind: PromptKind) -> Result<PromptTemplate, PromptError> {
    let instruction = match kind {
        PromptKind::Simple => SIMPLE_INSTRUCTION,
        PromptKind::ModifiedClotho => MODIFIED_CLOTHO_INSTRUCTION,
        PromptKind::ModifiedWavCaps => MODIFIED_WAVCAPS_INSTRUCTION,
        PromptKind::Custom => return Err(PromptError::NotBuiltin(kind)),
    };
    Ok(PromptTemplate {
        kind,
        instruction_text: instruction.to_string(),
        requested_count: DEFAULT_REQUESTED_COUNT,
    })
}

impl PromptTemplate {
    pub fn custom(instruction_text: impl Into<String>) -> Self {
        PromptTemplate {
            kind: PromptKind::Custom,
            instruction_text: instruction_text.into(),
            requested_count: DEFAULT_REQUESTED_COUNT,
        }
    }

    pub fn with_count(mut self, count: u32) -> Result<Self, PromptError> {
        if count == 0 {
            return Err(PromptError::ZeroCount);
        }
        self.requested_count = count;
        Ok(self)
    }

    /// Checks the template invariants. Deserialized templates should be
    /// validated before use.
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.requested_count == 0 {
            return Err(PromptError::ZeroCount);
        }
        if self.kind != PromptKind::Custom {
            let n = self.instruction_text.matches(COUNT_PLACEHOLDER).count();
            if n != 1 {
                return Err(PromptError::CountPlaceholder(n));
            }
        }
        Ok(())
    }

    /// Instruction text in its display notation, with `(#)` standing
    /// for the requested count.
    pub fn display_text(&self) -> String {
        self.instruction_text
            .replace(COUNT_PLACEHOLDER, "(#)")
            .replace(CAPTION_PLACEHOLDER, "{Caption}")
    }

    pub fn render(&self, source_caption: &str, count_override: Option<u32>) -> Result<String, PromptError> {
        render(self, source_caption, count_override)
    }
}

/// Renders a concrete instruction for one source caption.
pub fn render(
    template: &PromptTemplate,
    source_caption: &str,
    count_override: Option<u32>,
) -> Result<String, PromptError> {
    template.validate()?;
    if source_caption.trim().is_empty() {
        return Err(PromptError::EmptyCaption);
    }
    if source_caption.contains(COUNT_PLACEHOLDER) || source_caption.contains(CAPTION_PLACEHOLDER) {
        return Err(PromptError::PlaceholderInCaption);
    }
    let count = match count_override {
        Some(0) => return Err(PromptError::ZeroCount),
        Some(n) => n,
        None => template.requested_count,
    };

    let text = template
        .instruction_text
        .replace(COUNT_PLACEHOLDER, &count.to_string());
    if text.contains(CAPTION_PLACEHOLDER) {
        Ok(text.replace(CAPTION_PLACEHOLDER, source_caption))
    } else {
        Ok(format!("{text}\n{source_caption}"))
    }
}
