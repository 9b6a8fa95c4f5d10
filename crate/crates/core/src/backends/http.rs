//! JSON-over-HTTP clients.
//!
//! - LLM: chat-completions style `POST {llm.url}` with system/user messages;
//!   the first textual completion is returned.
//! - Detector: `POST {detector.url}/detect` with `{"image", "prompt", "max"}`,
//!   reply `{"boxes": [[x0,y0,x1,y1], ...], "scores": [...]}`.
//! - Scorer: `POST {scorer.url}/score` with `{"image", "box", "texts"}`,
//!   reply `{"scores": [...]}`.
//!
//! Transport failures are retried once.

use std::time::Duration;

use log::warn;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{BackendError, DetectorBackend, LlmBackend, ScorerBackend};
use crate::types::{BBox, Candidate, ImageRef};

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub url: String,
    pub timeout: Duration,
    pub bearer_token: Option<String>,
}

impl HttpSettings {
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into(), timeout: Duration::from_secs(60), bearer_token: None }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn agent(&self) -> ureq::Agent {
        ureq::AgentBuilder::new().timeout(self.timeout).build()
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.url.trim_end_matches('/'), path)
    }
}

// ureq's error type is large; it never leaves this function.
#[allow(clippy::result_large_err)]
fn post_json(
    agent: &ureq::Agent,
    settings: &HttpSettings,
    url: &str,
    body: &Value,
    service: &'static str,
    prompt: &str,
) -> Result<Value, BackendError> {
    let send = || {
        let mut req = agent.post(url);
        if let Some(token) = &settings.bearer_token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        req.send_json(body.clone())
    };
    let resp = match send() {
        Err(ureq::Error::Transport(first)) => {
            warn!("{service}: transport failure ({first}), retrying once");
            send()
        }
        other => other,
    };
    match resp {
        Ok(r) => r
            .into_json::<Value>()
            .map_err(|e| BackendError::Protocol { service, detail: format!("reply is not JSON: {e}") }),
        Err(ureq::Error::Status(code, r)) => Err(BackendError::Status {
            service,
            prompt: prompt.to_string(),
            detail: format!("HTTP {code}: {}", r.into_string().unwrap_or_default()),
        }),
        Err(ureq::Error::Transport(t)) => {
            let detail = t.to_string();
            if detail.contains("timed out") {
                Err(BackendError::Timeout { service, prompt: prompt.to_string() })
            } else {
                Err(BackendError::Transport { service, prompt: prompt.to_string(), detail })
            }
        }
    }
}

/// Chat-completions client. Works with any server speaking the
/// `{"messages": [...]} -> {"choices": [{"message": {"content": ...}}]}` shape.
#[derive(Debug, Clone)]
pub struct HttpLlm {
    settings: HttpSettings,
    model: Option<String>,
    agent: ureq::Agent,
}

impl HttpLlm {
    pub fn new(settings: HttpSettings, model: Option<String>) -> Self {
        let agent = settings.agent();
        Self { settings, model, agent }
    }
}

fn first_completion(v: &Value) -> Option<&str> {
    v.pointer("/choices/0/message/content")
        .or_else(|| v.pointer("/choices/0/text"))
        .or_else(|| v.pointer("/message/content"))
        .and_then(Value::as_str)
}

impl LlmBackend for HttpLlm {
    fn complete(&self, system: &str, user: &str) -> Result<String, BackendError> {
        let mut body = json!({
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0.0,
            "stream": false,
        });
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        let reply = post_json(&self.agent, &self.settings, &self.settings.url, &body, "llm", user)?;
        first_completion(&reply)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol { service: "llm", detail: format!("no completion text in {reply}") })
    }
}

#[derive(Deserialize)]
struct DetectReply {
    boxes: Vec<[f64; 4]>,
    scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HttpDetector {
    settings: HttpSettings,
    agent: ureq::Agent,
}

impl HttpDetector {
    pub fn new(settings: HttpSettings) -> Self {
        let agent = settings.agent();
        Self { settings, agent }
    }
}

/// Validates a detector reply. Ids follow the service's reply order.
pub(crate) fn candidates_from_reply(boxes: &[[f64; 4]], scores: &[f64]) -> Result<Vec<Candidate>, BackendError> {
    let bad = |detail: String| BackendError::Protocol { service: "detector", detail };
    if boxes.len() != scores.len() {
        return Err(bad(format!("{} boxes but {} scores", boxes.len(), scores.len())));
    }
    boxes
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (b, &s))| {
            let bbox = BBox::try_from(*b).map_err(|e| bad(e.to_string()))?;
            if !s.is_finite() {
                return Err(bad(format!("non-finite score {s}")));
            }
            let conf = if (0.0..=1.0).contains(&s) {
                s
            } else {
                warn!("detector: score {s} outside [0, 1], clamping");
                s.clamp(0.0, 1.0)
            };
            Candidate::new(i as u32, bbox, conf).map_err(|e| bad(e.to_string()))
        })
        .collect()
}

impl DetectorBackend for HttpDetector {
    fn detect(&self, image: &ImageRef, prompt: &str, max_candidates: usize) -> Result<Vec<Candidate>, BackendError> {
        let body = json!({"image": image.uri, "prompt": prompt, "max": max_candidates});
        let url = self.settings.endpoint("detect");
        let reply = post_json(&self.agent, &self.settings, &url, &body, "detector", prompt)?;
        let reply: DetectReply = serde_json::from_value(reply)
            .map_err(|e| BackendError::Protocol { service: "detector", detail: e.to_string() })?;
        candidates_from_reply(&reply.boxes, &reply.scores)
    }
}

#[derive(Deserialize)]
struct ScoreReply {
    scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HttpScorer {
    settings: HttpSettings,
    agent: ureq::Agent,
}

impl HttpScorer {
    pub fn new(settings: HttpSettings) -> Self {
        let agent = settings.agent();
        Self { settings, agent }
    }
}

impl ScorerBackend for HttpScorer {
    fn score_texts(&self, image: &ImageRef, bbox: &BBox, texts: &[String]) -> Result<Vec<f64>, BackendError> {
        let body = json!({"image": image.uri, "box": bbox.to_array(), "texts": texts});
        let url = self.settings.endpoint("score");
        let reply = post_json(&self.agent, &self.settings, &url, &body, "scorer", &texts.join(" | "))?;
        let reply: ScoreReply = serde_json::from_value(reply)
            .map_err(|e| BackendError::Protocol { service: "scorer", detail: e.to_string() })?;
        Ok(reply.scores)
    }
}
