//! Sentence-scoped negation/uncertainty/history rule engine.
//!
//! Each concept mention gets exactly one context, checked in this order:
//! uncertain (an uncertainty trigger anywhere in the sentence), negated (a
//! negation trigger ending within [`NEGATION_WINDOW`] tokens before the
//! mention), historical (a historical trigger before the mention and no acute
//! trigger in the sentence), acute (an acute trigger in the sentence), and
//! otherwise present.

use serde::{Deserialize, Serialize};

use super::lexicon::{ConceptCategory, RuleLexicon};
use super::{ActivityLabel, ReportDoc};

pub const NEGATION_WINDOW: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    Negated,
    Uncertain,
    Historical,
    Acute,
    Present,
    /// Hedging or study-quality language not attached to a concept.
    Hedge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Impression,
    Findings,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub section: Section,
    pub sentence: usize,
    pub concept: Option<String>,
    pub category: Option<ConceptCategory>,
    pub trigger: Option<String>,
    pub context: Context,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTrace {
    pub entries: Vec<TraceEntry>,
}

impl RuleTrace {
    /// Minimal text carrying every recorded (trigger, concept) pair, one
    /// sentence per entry. Classifying it reproduces the original label.
    pub fn reconstruct(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                let words: Vec<&str> = match (&e.context, &e.trigger, &e.concept) {
                    (Context::Present, _, Some(c)) => vec![c],
                    (_, Some(t), Some(c)) => vec![t, c],
                    (_, Some(t), None) => vec![t],
                    (_, None, Some(c)) => vec![c],
                    (_, None, None) => vec![],
                };
                format!("{}.", words.join(" "))
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercased word tokens; hyphens and apostrophes inside words are kept.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let keep = |i: usize| {
        let c = chars[i];
        c.is_alphanumeric()
            || c == '-'
            || c == '\''
            || (c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit()))
    };
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if keep(i) {
            cur.push(c);
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    out.push(cur);
    out.into_iter()
        .map(|t| t.trim_matches(|c| c == '-' || c == '\'').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Splits on `!`, `?`, `;`, newlines, and `.` followed by whitespace or end
/// of text (so decimals such as `1.5` stay inside their sentence).
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let boundary = match c {
            '!' | '?' | ';' | '\n' => true,
            '.' => chars.peek().is_none_or(|&(_, n)| n.is_whitespace()),
            _ => false,
        };
        if boundary {
            out.push(&text[start..i]);
            start = i + c.len_utf8();
        }
    }
    out.push(&text[start..]);
    out.into_iter().filter(|s| !s.trim().is_empty()).collect()
}

/// Greedy longest-first, non-overlapping matches: (start, end_exclusive, term index).
fn find_terms<'a, I>(tokens: &[String], terms: I) -> Vec<(usize, usize, usize)>
where
    I: IntoIterator<Item = &'a Vec<String>> + Clone,
{
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let best = terms
            .clone()
            .into_iter()
            .enumerate()
            .filter(|(_, t)| !t.is_empty() && tokens[pos..].starts_with(t))
            .max_by_key(|(i, t)| (t.len(), std::cmp::Reverse(*i)));
        match best {
            Some((i, t)) => {
                out.push((pos, pos + t.len(), i));
                pos += t.len();
            }
            None => pos += 1,
        }
    }
    out
}

fn classify_section(text: &str, section: Section, lex: &RuleLexicon, trace: &mut Vec<TraceEntry>) {
    for (si, sentence) in sentences(text).into_iter().enumerate() {
        let tokens = tokenize(sentence);
        if tokens.is_empty() {
            continue;
        }
        let join = |(s, e, _): (usize, usize, usize)| tokens[s..e].join(" ");
        let concepts = find_terms(&tokens, lex.concepts.iter().map(|(t, _)| t));
        let negations = find_terms(&tokens, &lex.negation);
        let uncertain = find_terms(&tokens, &lex.uncertainty);
        let historical = find_terms(&tokens, &lex.historical);
        let acute = find_terms(&tokens, &lex.acute);
        let quality = find_terms(&tokens, &lex.quality);

        for &(cs, ce, ci) in &concepts {
            let concept = tokens[cs..ce].join(" ");
            let category = lex.concepts[ci].1;
            let (context, trigger) = if let Some(&u) = uncertain.first() {
                (Context::Uncertain, Some(join(u)))
            } else if let Some(&n) = negations
                .iter()
                .rev()
                .find(|&&(_, ne, _)| ne <= cs && cs - (ne - 1) <= NEGATION_WINDOW)
            {
                (Context::Negated, Some(join(n)))
            } else if let (Some(&h), true) = (
                historical.iter().rev().find(|&&(_, he, _)| he <= cs),
                acute.is_empty(),
            ) {
                (Context::Historical, Some(join(h)))
            } else if let Some(&a) = acute.first() {
                (Context::Acute, Some(join(a)))
            } else {
                (Context::Present, None)
            };
            trace.push(TraceEntry {
                section,
                sentence: si,
                concept: Some(concept),
                category: Some(category),
                trigger,
                context,
            });
        }
        let hedges = quality
            .iter()
            .chain(if concepts.is_empty() { uncertain.iter() } else { [].iter() });
        for &m in hedges {
            trace.push(TraceEntry {
                section,
                sentence: si,
                concept: None,
                category: None,
                trigger: Some(join(m)),
                context: Context::Hedge,
            });
        }
    }
}

fn decide(entries: &[TraceEntry]) -> ActivityLabel {
    use ConceptCategory::*;
    let definite = entries.iter().any(|e| {
        matches!(
            (e.category, e.context),
            (Some(Inflammation | Complication), Context::Present | Context::Acute) | (Some(_), Context::Acute)
        )
    });
    if definite {
        return ActivityLabel::Abnormal;
    }
    let possible = entries.iter().any(|e| {
        matches!(
            (e.category, e.context),
            (_, Context::Uncertain | Context::Hedge | Context::Historical)
                | (Some(ObjectiveFinding), Context::Present)
        )
    });
    if possible {
        ActivityLabel::PossiblyAbnormal
    } else {
        ActivityLabel::Normal
    }
}

/// Classifies a report: the impression first, then (unless the impression is
/// already definitely abnormal) the findings.
///
/// Decision: an inflammation or complication concept in present/acute context,
/// or any concept with an acute trigger, is abnormal. Otherwise uncertain
/// mentions, hedging/quality language, historical-only findings, or a present
/// objective finding without an acute trigger give possibly abnormal. All
/// concepts negated, or none at all, is normal.
pub fn rule_classify(doc: &ReportDoc, lex: &RuleLexicon) -> (ActivityLabel, RuleTrace) {
    let mut entries = Vec::new();
    classify_section(&doc.impression, Section::Impression, lex, &mut entries);
    if decide(&entries) != ActivityLabel::Abnormal {
        classify_section(&doc.findings, Section::Findings, lex, &mut entries);
    }
    let label = decide(&entries);
    (label, RuleTrace { entries })
}
