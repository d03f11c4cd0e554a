use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::rules::tokenize;

/// Lexicon shipped with the crate.
pub const DEFAULT_LEXICON: &str = include_str!("../../data/lexicon.txt");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("line {line}: term outside of any [section]")]
    TermOutsideSection { line: usize },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("section [{0}] is empty")]
    EmptySection(&'static str),
    #[error("reading lexicon: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptCategory {
    Inflammation,
    ObjectiveFinding,
    Complication,
}

/// Trigger and concept term lists. Each term is stored as its token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RuleLexicon {
    pub negation: Vec<Vec<String>>,
    pub uncertainty: Vec<Vec<String>>,
    pub historical: Vec<Vec<String>>,
    pub acute: Vec<Vec<String>>,
    pub quality: Vec<Vec<String>>,
    pub concepts: Vec<(Vec<String>, ConceptCategory)>,
}

impl RuleLexicon {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut lex = RuleLexicon::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim().to_lowercase();
                if !SECTIONS.contains(&name.as_str()) {
                    return Err(LexiconError::UnknownSection { line: i + 1, name });
                }
                section = Some(name);
                continue;
            }
            let Some(sec) = section.as_deref() else {
                return Err(LexiconError::TermOutsideSection { line: i + 1 });
            };
            let term = tokenize(line);
            if term.is_empty() {
                continue;
            }
            match sec {
                "negation" => lex.negation.push(term),
                "uncertainty" => lex.uncertainty.push(term),
                "historical" => lex.historical.push(term),
                "acute" => lex.acute.push(term),
                "quality" => lex.quality.push(term),
                "inflammation" => lex.concepts.push((term, ConceptCategory::Inflammation)),
                "objective_findings" => lex.concepts.push((term, ConceptCategory::ObjectiveFinding)),
                "complications" => lex.concepts.push((term, ConceptCategory::Complication)),
                _ => unreachable!("section validated above"),
            }
        }
        lex.validate()?;
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), LexiconError> {
        let lists: [(&'static str, usize); 5] = [
            ("negation", self.negation.len()),
            ("uncertainty", self.uncertainty.len()),
            ("historical", self.historical.len()),
            ("acute", self.acute.len()),
            ("quality", self.quality.len()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, n)| *n == 0) {
            return Err(LexiconError::EmptySection(name));
        }
        for (cat, name) in [
            (ConceptCategory::Inflammation, "inflammation"),
            (ConceptCategory::ObjectiveFinding, "objective_findings"),
            (ConceptCategory::Complication, "complications"),
        ] {
            if !self.concepts.iter().any(|(_, c)| *c == cat) {
                return Err(LexiconError::EmptySection(name));
            }
        }
        Ok(())
    }
}

impl RuleLexicon {
    /// The bundled lexicon, parsed once.
    pub fn bundled() -> &'static RuleLexicon {
        static LEX: std::sync::OnceLock<RuleLexicon> = std::sync::OnceLock::new();
        LEX.get_or_init(|| RuleLexicon::parse(DEFAULT_LEXICON).expect("bundled lexicon parses"))
    }
}

const SECTIONS: [&str; 8] = [
    "negation",
    "uncertainty",
    "historical",
    "acute",
    "quality",
    "inflammation",
    "objective_findings",
    "complications",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_lexicon_has_seed_terms() {
        let lex = RuleLexicon::bundled();
        let has = |list: &Vec<Vec<String>>, t: &str| list.contains(&tokenize(t));
        for t in ["no", "without", "absence of"] {
            assert!(has(&lex.negation, t), "{t}");
        }
        for t in ["possible", "may represent", "cannot exclude"] {
            assert!(has(&lex.uncertainty, t), "{t}");
        }
        for t in ["history of", "prior", "chronic"] {
            assert!(has(&lex.historical, t), "{t}");
        }
        for t in ["active", "acute", "flare"] {
            assert!(has(&lex.acute, t), "{t}");
        }
        let concept = |t: &str| lex.concepts.iter().find(|(c, _)| *c == tokenize(t)).map(|x| x.1);
        assert_eq!(concept("ileitis"), Some(ConceptCategory::Inflammation));
        assert_eq!(concept("submucosal edema"), Some(ConceptCategory::ObjectiveFinding));
        assert_eq!(concept("perforation"), Some(ConceptCategory::Complication));
    }

    #[test]
    fn terms_are_normalized() {
        let lex = RuleLexicon::parse(
            "[negation]\n  NO   Evidence  of \n[uncertainty]\nx\n[historical]\ny\n[acute]\nz\n[quality]\nq\n\
             [inflammation]\na\n[objective_findings]\nb\n[complications]\nc\n",
        )
        .unwrap();
        assert_eq!(lex.negation, vec![vec!["no", "evidence", "of"]]);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            RuleLexicon::parse("orphan\n"),
            Err(LexiconError::TermOutsideSection { line: 1 })
        ));
        assert!(matches!(
            RuleLexicon::parse("[bogus]\n"),
            Err(LexiconError::UnknownSection { .. })
        ));
        assert!(matches!(
            RuleLexicon::parse("[negation]\nno\n"),
            Err(LexiconError::EmptySection("uncertainty"))
        ));
    }
}
