//! External LLM teachers: fixed few-shot prompt, deterministic decoding,
//! keyword parsing of the reply.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use super::{ActivityLabel, ReportDoc};
use crate::chat::{ChatClient, ChatError, ChatMessage, ChatRequest};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("teacher unavailable: {0}")]
    TeacherUnavailable(#[from] ChatError),
    #[error("no taxonomy keyword in reply {0:?}")]
    UnparseableVote(String),
}

/// Instructions shared verbatim by every teacher.
pub const FEW_SHOT_PROMPT: &str = "\
You label abdominal CT enterography reports for inflammatory bowel disease activity.
Answer with exactly one of: normal, possibly abnormal, abnormal.

Rules:
- abnormal: definite active disease, including inflammation, infection, obstruction, perforation, abscess, or fistula.
- possibly abnormal: uncertain or hedged findings, limited study quality, or historical findings only.
- normal: no clinically meaningful abnormality.
- Base the decision on the impression first; use the findings only when the impression is not definite.
- Negated findings (\"no\", \"without\", \"absence of\") do not count as present.";

const SHOTS: [(&str, &str); 3] = [
    (
        "IMPRESSION: No evidence of active inflammatory bowel disease.",
        "normal",
    ),
    (
        "IMPRESSION: Mild wall thickening of the terminal ileum may represent early ileitis; cannot exclude active Crohn disease.",
        "possibly abnormal",
    ),
    (
        "IMPRESSION: Active terminal ileitis with a 2 cm intra-abdominal abscess.",
        "abnormal",
    ),
];

pub fn teacher_prompt(doc: &ReportDoc) -> ChatRequest {
    let mut messages = vec![ChatMessage::system(FEW_SHOT_PROMPT)];
    for (q, a) in SHOTS {
        messages.push(ChatMessage::user(q));
        messages.push(ChatMessage::assistant(a));
    }
    messages.push(ChatMessage::user(format!(
        "FINDINGS: {}\nIMPRESSION: {}",
        doc.findings.trim(),
        doc.impression.trim()
    )));
    ChatRequest {
        messages,
        temperature: 0.0,
        max_tokens: Some(16),
        n: Some(1),
        ..Default::default()
    }
}

/// First taxonomy keyword in the reply. "possibly abnormal" is matched before
/// "abnormal", which is matched before "normal".
pub fn parse_vote(reply: &str) -> Result<ActivityLabel, TeacherError> {
    let words: Vec<String> = reply
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();
    for (i, w) in words.iter().enumerate() {
        match w.as_str() {
            "possibly" if words.get(i + 1).is_some_and(|n| n == "abnormal") => {
                return Ok(ActivityLabel::PossiblyAbnormal)
            }
            "abnormal" => return Ok(ActivityLabel::Abnormal),
            "normal" => return Ok(ActivityLabel::Normal),
            _ => {}
        }
    }
    Err(TeacherError::UnparseableVote(reply.to_string()))
}

/// A named teacher backed by a chat client.
pub struct Teacher {
    pub name: String,
    pub client: Box<dyn ChatClient>,
}

pub fn teacher_vote(doc: &ReportDoc, teacher: &dyn ChatClient) -> Result<ActivityLabel, TeacherError> {
    let replies = teacher.complete(&teacher_prompt(doc))?;
    let first = replies
        .first()
        .ok_or_else(|| TeacherError::UnparseableVote(String::new()))?;
    parse_vote(first)
}

/// Votes on every document with at most `max_in_flight` concurrent requests.
/// Results keep input order.
pub fn vote_batch(
    docs: &[ReportDoc],
    teacher: &dyn ChatClient,
    max_in_flight: usize,
) -> Vec<Result<ActivityLabel, TeacherError>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<ActivityLabel, TeacherError>>>> =
        docs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..max_in_flight.clamp(1, docs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= docs.len() {
                    break;
                }
                let r = teacher_vote(&docs[i], teacher);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}
