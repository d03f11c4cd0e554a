//! Report pseudolabeling: impression normalization, the negation/uncertainty
//! rule engine, external LLM teacher votes and three-way consensus.

mod consensus;
mod lexicon;
mod rules;
mod teacher;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use consensus::{consensus, consensus_with_failures, Confidence, ConsensusResult, Vote};
pub use lexicon::{ConceptCategory, LexiconError, RuleLexicon};
pub use rules::{rule_classify, tokenize, Context, RuleTrace, Section, TraceEntry};
pub use teacher::{
    parse_vote, teacher_prompt, teacher_vote, vote_batch, Teacher, TeacherError, FEW_SHOT_PROMPT,
};

/// Three-class activity taxonomy with a fixed ordinal mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityLabel {
    Normal,
    PossiblyAbnormal,
    Abnormal,
}

impl ActivityLabel {
    pub const ALL: [ActivityLabel; 3] = [
        ActivityLabel::Normal,
        ActivityLabel::PossiblyAbnormal,
        ActivityLabel::Abnormal,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(o: usize) -> Option<Self> {
        Self::ALL.get(o).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActivityLabel::Normal => "normal",
            ActivityLabel::PossiblyAbnormal => "possibly_abnormal",
            ActivityLabel::Abnormal => "abnormal",
        }
    }
}

impl fmt::Display for ActivityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
#[error("unknown activity label {0:?}")]
pub struct ParseLabelError(String);

impl FromStr for ActivityLabel {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().replace([' ', '-'], "_").as_str() {
            "normal" | "0" => Ok(ActivityLabel::Normal),
            "possibly_abnormal" | "1" => Ok(ActivityLabel::PossiblyAbnormal),
            "abnormal" | "2" => Ok(ActivityLabel::Abnormal),
            _ => Err(ParseLabelError(s.to_string())),
        }
    }
}

/// A radiology report split into its findings and impression sections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub study_id: String,
    pub findings: String,
    pub impression: String,
}

impl ReportDoc {
    pub fn new(
        study_id: impl Into<String>,
        findings: impl Into<String>,
        impression: impl Into<String>,
    ) -> Self {
        Self {
            study_id: study_id.into(),
            findings: findings.into(),
            impression: impression.into(),
        }
    }

    pub fn normalized_impression(&self) -> String {
        normalize_impression(&self.impression)
    }
}

/// Lowercases, collapses whitespace, trims, and strips terminal `.`, `!`, `;`.
pub fn normalize_impression(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| matches!(c, '.' | '!' | ';') || c.is_whitespace())
        .to_string()
}
