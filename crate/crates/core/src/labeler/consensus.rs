use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ActivityLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    High,
    Medium,
    Abstain,
}

/// One teacher's vote. `label` is `None` when the teacher failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub teacher: String,
    pub label: Option<ActivityLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusResult {
    /// `None` on abstention.
    pub label: Option<ActivityLabel>,
    pub confidence: Confidence,
    pub votes: Vec<Vote>,
}

impl ConsensusResult {
    pub fn is_abstain(&self) -> bool {
        self.confidence == Confidence::Abstain
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("consensus needs exactly 3 votes, got {0}")]
pub struct WrongVoteCount(pub usize);

/// Majority vote over three teachers: unanimous is high confidence, two of
/// three is medium, all distinct abstains.
pub fn consensus(votes: &[ActivityLabel]) -> Result<(Option<ActivityLabel>, Confidence), WrongVoteCount> {
    let [a, b, c] = votes else {
        return Err(WrongVoteCount(votes.len()));
    };
    Ok(if a == b && b == c {
        (Some(*a), Confidence::High)
    } else if a == b || a == c {
        (Some(*a), Confidence::Medium)
    } else if b == c {
        (Some(*b), Confidence::Medium)
    } else {
        (None, Confidence::Abstain)
    })
}

/// Consensus over three named votes, any of which may have failed. A failed
/// vote never matches another vote, so one failure caps confidence at medium
/// and two failures abstain.
pub fn consensus_with_failures(votes: Vec<Vote>) -> Result<ConsensusResult, WrongVoteCount> {
    if votes.len() != 3 {
        return Err(WrongVoteCount(votes.len()));
    }
    let labels: Vec<ActivityLabel> = votes.iter().filter_map(|v| v.label).collect();
    let (label, confidence) = match labels.len() {
        3 => consensus(&labels)?,
        2 if labels[0] == labels[1] => (Some(labels[0]), Confidence::Medium),
        _ => (None, Confidence::Abstain),
    };
    Ok(ConsensusResult {
        label,
        confidence,
        votes,
    })
}
