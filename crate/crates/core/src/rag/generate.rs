use serde::{Deserialize, Serialize};
use serde_json::{json, Map};

use super::{RagError, RagPrompt};
use crate::chat::{ChatClient, ChatError, ChatMessage, ChatRequest};

pub const MIN_CHARS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub max_new_tokens: u32,
    pub min_new_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub no_repeat_ngram: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 240,
            min_new_tokens: 48,
            temperature: 0.6,
            top_p: 0.9,
            repetition_penalty: 1.08,
            no_repeat_ngram: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: RagPrompt,
    pub decoding: DecodingParams,
    pub best_of: u32,
    pub max_retries: u32,
    /// Montage attached when the client accepts images.
    pub image_png_base64: Option<String>,
}

impl GenerationRequest {
    pub fn new(prompt: RagPrompt) -> Self {
        Self {
            prompt,
            decoding: DecodingParams::default(),
            best_of: 4,
            max_retries: 3,
            image_png_base64: None,
        }
    }

    pub fn validate(&self) -> Result<(), RagError> {
        let d = &self.decoding;
        if d.min_new_tokens == 0 || d.max_new_tokens <= d.min_new_tokens {
            return Err(RagError::InvalidConfig(format!(
                "need max_new_tokens > min_new_tokens > 0, got {} / {}",
                d.max_new_tokens, d.min_new_tokens
            )));
        }
        if self.best_of == 0 {
            return Err(RagError::InvalidConfig("best_of must be positive".into()));
        }
        if !(d.temperature >= 0.0 && d.top_p > 0.0 && d.top_p <= 1.0) {
            return Err(RagError::InvalidConfig(format!("bad sampling parameters {d:?}")));
        }
        Ok(())
    }

    fn chat_request(&self, client: &dyn ChatClient) -> ChatRequest {
        let user = match &self.image_png_base64 {
            Some(png) if client.supports_images() => ChatMessage::user_with_png(&self.prompt.user, png),
            Some(_) => {
                log::warn!("client {} does not accept images; sending text only", client.name());
                ChatMessage::user(&self.prompt.user)
            }
            None => ChatMessage::user(&self.prompt.user),
        };
        let d = &self.decoding;
        let mut extra = Map::new();
        extra.insert("min_tokens".into(), json!(d.min_new_tokens));
        extra.insert("repetition_penalty".into(), json!(d.repetition_penalty));
        extra.insert("no_repeat_ngram_size".into(), json!(d.no_repeat_ngram));
        ChatRequest {
            messages: vec![ChatMessage::system(&self.prompt.system), user],
            temperature: d.temperature,
            top_p: Some(d.top_p),
            max_tokens: Some(d.max_new_tokens),
            n: Some(self.best_of),
            extra,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub degraded: bool,
    pub rounds: u32,
    pub sentences: usize,
}

/// Segments closed by `.`, `!` or `?` with some alphanumeric content. A
/// period between two digits is not a terminator.
pub fn count_sentences(text: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut has_content = false;
    for (i, &c) in chars.iter().enumerate() {
        let terminal = match c {
            '!' | '?' => true,
            '.' => {
                let digit = |j: Option<&char>| j.is_some_and(|c| c.is_ascii_digit());
                !(i > 0 && digit(chars.get(i - 1)) && digit(chars.get(i + 1)))
            }
            _ => false,
        };
        if terminal {
            if has_content {
                count += 1;
            }
            has_content = false;
        } else if c.is_alphanumeric() {
            has_content = true;
        }
    }
    count
}

pub fn passes_filter(text: &str) -> bool {
    text.trim().chars().count() >= MIN_CHARS && count_sentences(text) >= 1
}

/// Index of the candidate with the most sentences among those passing the
/// filter; earliest wins ties.
pub fn select_best(candidates: &[String]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, c) in candidates.iter().enumerate() {
        if !passes_filter(c) {
            continue;
        }
        let s = count_sentences(c);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

fn badness_key(text: &str) -> (usize, usize) {
    (count_sentences(text).min(1), text.trim().chars().count())
}

/// One initial round plus up to `max_retries` more. When every round is
/// rejected the least-bad candidate seen is returned flagged `degraded`.
pub fn generate_with_filter(req: &GenerationRequest, client: &dyn ChatClient) -> Result<GenerationResult, RagError> {
    req.validate()?;
    let chat = req.chat_request(client);
    let mut fallback: Option<(String, (usize, usize))> = None;
    let mut last_err: Option<ChatError> = None;
    for round in 1..=req.max_retries + 1 {
        let candidates = match client.complete(&chat) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("generation round {round} failed: {e}");
                last_err = Some(e);
                continue;
            }
        };
        let candidates: Vec<String> = candidates.into_iter().map(|c| c.trim().to_string()).collect();
        if let Some(i) = select_best(&candidates) {
            return Ok(GenerationResult {
                sentences: count_sentences(&candidates[i]),
                text: candidates[i].clone(),
                degraded: false,
                rounds: round,
            });
        }
        for c in candidates {
            let key = badness_key(&c);
            if fallback.as_ref().is_none_or(|(_, k)| key > *k) {
                fallback = Some((c, key));
            }
        }
    }
    match (fallback, last_err) {
        (Some((text, _)), _) => Ok(GenerationResult {
            sentences: count_sentences(&text),
            text,
            degraded: true,
            rounds: req.max_retries + 1,
        }),
        (None, Some(e)) => Err(RagError::GenerationUnavailable(e)),
        (None, None) => Err(RagError::GenerationUnavailable(ChatError::Malformed("no candidates returned".into()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::stub_server::{completion, serve};
    use crate::chat::{Endpoint, HttpChatClient};
    use crate::rag::SYSTEM_MESSAGE;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    struct Scripted {
        rounds: Vec<Result<Vec<String>, ()>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn always(reply: &str) -> Self {
            Self {
                rounds: vec![Ok(vec![reply.to_string()])],
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl ChatClient for Scripted {
        fn complete(&self, _req: &ChatRequest) -> Result<Vec<String>, ChatError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            match &self.rounds[i.min(self.rounds.len() - 1)] {
                Ok(v) => Ok(v.clone()),
                Err(()) => Err(ChatError::Unavailable("down".into())),
            }
        }

        fn name(&self) -> &str {
            "scripted"
        }
    }

    fn request() -> GenerationRequest {
        GenerationRequest::new(RagPrompt {
            system: SYSTEM_MESSAGE.into(),
            user: "Write the impression.".into(),
        })
    }

    const FORTY: &str = "Mild terminal ileum thickening is seen.."; // 40 chars

    #[test]
    fn filter_rules() {
        assert!(!passes_filter("OK."));
        assert_eq!(FORTY.len(), 40);
        assert!(passes_filter(FORTY));
        assert!(!passes_filter("thirty or more characters but no terminator"));
        assert_eq!(count_sentences("Wall 1.5 cm. Normal! Really?"), 3);
        assert_eq!(count_sentences("..."), 0);
    }

    #[test]
    fn short_reply_retries_then_accepts() {
        let c = Scripted {
            rounds: vec![Ok(vec!["OK.".into()]), Ok(vec![FORTY.into()])],
            calls: AtomicUsize::new(0),
        };
        let r = generate_with_filter(&request(), &c).unwrap();
        assert_eq!((r.text.as_str(), r.degraded, r.rounds), (FORTY, false, 2));
        assert_eq!(c.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn most_sentences_then_client_order() {
        let a = "Active ileitis of the terminal ileum.".to_string();
        let b = "Active ileitis. Wall thickening of the ileum.".to_string();
        let b2 = "Mild ileitis. Mild thickening of the ileum too.".to_string();
        assert_eq!(select_best(&[a.clone(), b.clone(), b2.clone()]), Some(1));
        assert_eq!(select_best(&["OK.".into()]), None);
        let c = Scripted {
            rounds: vec![Ok(vec![a, b2.clone(), b])],
            calls: AtomicUsize::new(0),
        };
        assert_eq!(generate_with_filter(&request(), &c).unwrap().text, b2);
    }

    #[test]
    fn exhaustion_returns_degraded_after_three_retries() {
        let c = Scripted::always("OK.");
        let r = generate_with_filter(&request(), &c).unwrap();
        assert!(r.degraded);
        assert_eq!(r.text, "OK.");
        assert_eq!(c.calls.load(Ordering::SeqCst), 4);
        let r2 = generate_with_filter(&request(), &Scripted::always("OK.")).unwrap();
        assert_eq!(r, r2);
    }

    #[test]
    fn transport_failure_everywhere_is_unavailable() {
        let c = Scripted {
            rounds: vec![Err(())],
            calls: AtomicUsize::new(0),
        };
        assert!(matches!(generate_with_filter(&request(), &c), Err(RagError::GenerationUnavailable(_))));
        assert_eq!(c.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn invalid_decoding_rejected() {
        let mut r = request();
        r.decoding.min_new_tokens = 240;
        assert!(matches!(generate_with_filter(&r, &Scripted::always(FORTY)), Err(RagError::InvalidConfig(_))));
    }

    #[test]
    fn http_payload_carries_decoding_parameters() {
        let (url, rx) = serve(vec![(200, completion(&["OK.", FORTY, "no", "x"]))]);
        let client = HttpChatClient::new("gen", Endpoint::new(url, "gen-model"), Duration::from_secs(5));
        let mut req = request();
        req.image_png_base64 = Some("AAAA".into());
        let r = generate_with_filter(&req, &client).unwrap();
        assert_eq!(r.text, FORTY);
        let body: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(body["n"], 4);
        assert_eq!(body["max_tokens"], 240);
        assert_eq!(body["min_tokens"], 48);
        assert_eq!(body["temperature"], 0.6);
        assert_eq!(body["top_p"], 0.9);
        assert_eq!(body["repetition_penalty"], 1.08);
        assert_eq!(body["no_repeat_ngram_size"], 3);
        assert_eq!(body["messages"][0]["content"], SYSTEM_MESSAGE);
        // Text-only client: the image is dropped.
        assert!(body["messages"][1]["content"].is_string());
    }
}
