//! Pluggable external text metrics.
//!
//! Subprocess contract: the provider is started once and kept alive. For
//! every pair one JSON line is written to its stdin,
//! `{"candidate": "...", "reference": "..."}`, and exactly one JSON line is
//! read back from stdout, `{"score": <number>}` or `{"error": "..."}`.
//! Closing stdin ends the session.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::EvalError;

pub trait MetricProvider: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, candidate: &str, reference: &str) -> Result<f64, EvalError>;
}

#[derive(Serialize)]
struct Request<'a> {
    candidate: &'a str,
    reference: &'a str,
}

#[derive(Deserialize)]
struct Reply {
    score: Option<f64>,
    error: Option<String>,
}

struct Session {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

pub struct SubprocessMetric {
    name: String,
    session: Mutex<Session>,
}

fn provider_err(name: &str, msg: impl std::fmt::Display) -> EvalError {
    EvalError::Provider(format!("{name}: {msg}"))
}

impl SubprocessMetric {
    pub fn spawn(name: impl Into<String>, program: &str, args: &[&str]) -> Result<Self, EvalError> {
        let name = name.into();
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| provider_err(&name, e))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            name,
            session: Mutex::new(Session { child, stdin, stdout }),
        })
    }
}

impl MetricProvider for SubprocessMetric {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, candidate: &str, reference: &str) -> Result<f64, EvalError> {
        let mut s = self.session.lock().map_err(|_| provider_err(&self.name, "poisoned session"))?;
        let line = serde_json::to_string(&Request { candidate, reference }).expect("request serializes");
        writeln!(s.stdin, "{line}")
            .and_then(|_| s.stdin.flush())
            .map_err(|e| provider_err(&self.name, e))?;
        let mut reply = String::new();
        if s.stdout.read_line(&mut reply).map_err(|e| provider_err(&self.name, e))? == 0 {
            return Err(provider_err(&self.name, "provider closed its output"));
        }
        let r: Reply = serde_json::from_str(&reply).map_err(|e| provider_err(&self.name, e))?;
        match (r.score, r.error) {
            (Some(v), _) if v.is_finite() => Ok(v),
            (_, Some(e)) => Err(provider_err(&self.name, e)),
            _ => Err(provider_err(&self.name, format!("malformed reply {reply:?}"))),
        }
    }
}

impl Drop for SubprocessMetric {
    fn drop(&mut self) {
        if let Ok(s) = self.session.get_mut() {
            let _ = s.stdin.flush();
            let _ = s.child.kill();
            let _ = s.child.wait();
        }
    }
}

/// Mean score over pairs.
pub fn corpus_score(provider: &dyn MetricProvider, candidates: &[String], references: &[String]) -> Result<f64, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            left: candidates.len(),
            right: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut total = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        total += provider.score(c, r)?;
    }
    Ok(total / candidates.len() as f64)
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;

    #[test]
    fn subprocess_round_trip() {
        let script = r#"while IFS= read -r line; do
  case "$line" in
    *'"candidate":""'*) echo '{"error":"empty candidate"}' ;;
    *) echo '{"score":0.25}' ;;
  esac
done"#;
        let m = SubprocessMetric::spawn("stub", "sh", &["-c", script]).unwrap();
        assert_eq!(m.score("a b", "a c").unwrap(), 0.25);
        assert!(matches!(m.score("", "a"), Err(EvalError::Provider(_))));
        let c = vec!["x".to_string(), "y".to_string()];
        assert_eq!(corpus_score(&m, &c, &c).unwrap(), 0.25);
    }

    #[test]
    fn missing_program() {
        assert!(SubprocessMetric::spawn("none", "/nonexistent/metric", &[]).is_err());
    }
}
