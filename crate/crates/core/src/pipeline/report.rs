use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{read_json, write_jsonl, write_string};
use super::stages::{ClassifyOutput, GenerationOutput, RetrievalOutput};
use super::{PipelineError, Stage};
use crate::labeler::ActivityLabel;

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub table: String,
    pub row: String,
    pub metrics: BTreeMap<String, f64>,
}

fn row(table: &str, name: &str, metrics: impl IntoIterator<Item = (String, f64)>) -> ReportRow {
    ReportRow {
        table: table.into(),
        row: name.into(),
        metrics: metrics.into_iter().collect(),
    }
}

fn load<T: serde::de::DeserializeOwned>(dir: &Path, stage: Stage, file: &str) -> Option<T> {
    let path = dir.join(stage.dir_name()).join(file);
    path.exists().then(|| read_json(&path).ok()).flatten()
}

fn retrieval_rows(out: &RetrievalOutput) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for (name, rep) in &out.models {
        for (dir, m) in [("image_to_text", &rep.image_to_text), ("text_to_image", &rep.text_to_image)] {
            let mut metrics: Vec<(String, f64)> = m.recall_at.iter().map(|(k, v)| (format!("R@{k}"), *v)).collect();
            metrics.push(("MRR".into(), m.mrr));
            rows.push(row("retrieval", &format!("{name} {dir}"), metrics));
        }
    }
    let mut metrics: Vec<(String, f64)> = out.random_recall_at.iter().map(|(k, v)| (format!("R@{k}"), *v)).collect();
    metrics.push(("MRR".into(), out.random_mrr));
    rows.push(row("retrieval", "random", metrics));
    rows
}

fn f1_chance(p: f64, q: f64) -> f64 {
    if p + q == 0.0 {
        0.0
    } else {
        2.0 * p * q / (p + q)
    }
}

fn classify_rows(out: &ClassifyOutput) -> Vec<ReportRow> {
    let class_f1 = |f1: [f64; 3]| -> Vec<(String, f64)> {
        ActivityLabel::ALL
            .iter()
            .zip(f1)
            .map(|(l, v)| (format!("F1 {}", l.as_str()), v))
            .collect()
    };
    let mut rows = Vec::new();
    for (name, rep) in &out.models {
        let mut m = vec![("accuracy".to_string(), rep.accuracy), ("macro F1".to_string(), rep.macro_f1)];
        m.extend(class_f1([rep.per_class[0].f1, rep.per_class[1].f1, rep.per_class[2].f1]));
        rows.push(row("classification", name, m));
    }
    let prev = out.test_prevalence;
    let third = 1.0 / 3.0;
    let uniform_f1 = prev.map(|p| f1_chance(p, third));
    let mut m = vec![
        ("accuracy".to_string(), third),
        ("macro F1".to_string(), uniform_f1.iter().sum::<f64>() / 3.0),
    ];
    m.extend(class_f1(uniform_f1));
    rows.push(row("classification", "chance uniform", m));
    let major = (0..3).fold(0, |b, i| if prev[i] > prev[b] { i } else { b });
    let major_f1: [f64; 3] = std::array::from_fn(|i| if i == major { f1_chance(prev[i], 1.0) } else { 0.0 });
    let mut m = vec![
        ("accuracy".to_string(), prev[major]),
        ("macro F1".to_string(), major_f1.iter().sum::<f64>() / 3.0),
    ];
    m.extend(class_f1(major_f1));
    rows.push(row("classification", "chance majority", m));
    rows
}

fn generation_rows(out: &GenerationOutput) -> Vec<ReportRow> {
    let o = &out.consistency.ordinal;
    let c = &out.consistency.classification;
    vec![
        row(
            "generation",
            "generated",
            [
                ("ROUGE-L".to_string(), out.rouge_l),
                ("BLEU".to_string(), out.bleu),
                ("exact".to_string(), o.exact),
                ("MAE".to_string(), o.mae),
                ("within-1".to_string(), o.within1),
                ("macro F1".to_string(), c.macro_f1),
            ],
        ),
        row("generation", "chance prevalence", [("within-1".to_string(), o.chance_prevalence)]),
        row("generation", "chance uniform", [("within-1".to_string(), o.chance_uniform)]),
        row("generation", "chance simulated", [("within-1".to_string(), out.simulated_within1)]),
    ]
}

/// Collects every available result table in a run directory.
pub fn build_report(dir: &Path) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    if let Some(out) = load::<RetrievalOutput>(dir, Stage::EvalRetrieval, "retrieval.json") {
        rows.extend(retrieval_rows(&out));
    }
    if let Some(out) = load::<ClassifyOutput>(dir, Stage::EvalClassify, "classify.json") {
        rows.extend(classify_rows(&out));
    }
    if let Some(out) = load::<GenerationOutput>(dir, Stage::GenEval, "generation.json") {
        rows.extend(generation_rows(&out));
    }
    rows
}

/// Sorts `R@5` before `R@10`.
fn column_key(name: &str) -> (String, u64) {
    let digits = name.len() - name.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let (head, tail) = name.split_at(name.len() - digits);
    (head.to_string(), tail.parse().unwrap_or(0))
}

/// Plain-text tables, one block per table.
pub fn render_text(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let mut tables: Vec<&str> = Vec::new();
    for r in rows {
        if !tables.contains(&r.table.as_str()) {
            tables.push(&r.table);
        }
    }
    for table in tables {
        let block: Vec<&ReportRow> = rows.iter().filter(|r| r.table == table).collect();
        let mut cols: Vec<&str> = Vec::new();
        for r in &block {
            for k in r.metrics.keys() {
                if !cols.contains(&k.as_str()) {
                    cols.push(k);
                }
            }
        }
        cols.sort_by_key(|c| column_key(c));
        let name_w = block.iter().map(|r| r.row.len()).max().unwrap_or(0).max(table.len());
        let col_w: Vec<usize> = cols.iter().map(|c| c.len().max(6)).collect();
        out.push_str(&format!("{table:<name_w$}"));
        for (c, w) in cols.iter().zip(&col_w) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push('\n');
        for r in block {
            out.push_str(&format!("{:<name_w$}", r.row));
            for (c, w) in cols.iter().zip(&col_w) {
                match r.metrics.get(*c) {
                    Some(v) => out.push_str(&format!("  {v:>w$.4}")),
                    None => out.push_str(&format!("  {:>w$}", "-")),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Writes `report.jsonl` and `report.txt` into the run directory.
pub fn write_report(dir: &Path) -> Result<Vec<ReportRow>, PipelineError> {
    let rows = build_report(dir);
    write_jsonl(&dir.join("report.jsonl"), &rows)?;
    write_string(&dir.join("report.txt"), &render_text(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_aligned_tables() {
        let rows = vec![
            row("retrieval", "trained", [("R@10".to_string(), 0.5), ("R@5".to_string(), 0.25)]),
            row("retrieval", "random", [("R@10".to_string(), 0.1)]),
        ];
        let text = render_text(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "retrieval     R@5    R@10");
        assert_eq!(lines[1], "trained    0.2500  0.5000");
        assert_eq!(lines[2], "random          -  0.1000");
    }

    #[test]
    fn empty_run_has_no_rows() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_report(dir.path()).unwrap().is_empty());
        assert_eq!(std::fs::read_to_string(dir.path().join("report.txt")).unwrap(), "");
    }

    #[test]
    fn chance_f1_matches_closed_form() {
        assert!((f1_chance(0.5, 1.0 / 3.0) - 0.4).abs() < 1e-12);
        assert_eq!(f1_chance(0.0, 0.0), 0.0);
    }
}
