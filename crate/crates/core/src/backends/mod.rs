//! Abstract model backends: an LLM, a text-prompted grounding detector and a
//! region-text scorer.
//!
//! [`BackendSet`] is the only way the engine reaches a backend. It enforces the
//! call contracts (non-empty prompts, sorted and truncated detections, finite
//! scores) and serializes calls to handles that declare single-flight.

use std::collections::HashSet;
use std::sync::{Arc, Mutex, MutexGuard};

use thiserror::Error;

use crate::types::{BBox, Candidate, ImageRef};

pub mod http;
pub mod mock;

pub use http::{HttpDetector, HttpLlm, HttpScorer, HttpSettings};
pub use mock::{MockScript, ScriptedDetector, ScriptedLlm, ScriptedScorer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("{service} transport error for prompt {prompt:?}: {detail}")]
    Transport { service: &'static str, prompt: String, detail: String },
    #[error("{service} timed out for prompt {prompt:?}")]
    Timeout { service: &'static str, prompt: String },
    #[error("{service} replied with an error for prompt {prompt:?}: {detail}")]
    Status { service: &'static str, prompt: String, detail: String },
    #[error("{service} returned a malformed reply: {detail}")]
    Protocol { service: &'static str, detail: String },
    #[error("no scripted {service} entry for {key:?}")]
    MissingScript { service: &'static str, key: String },
    #[error("invalid {service} request: {detail}")]
    InvalidRequest { service: &'static str, detail: String },
}

impl BackendError {
    /// Service unreachable or unresponsive, as opposed to a bad reply.
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport { .. } | BackendError::Timeout { .. })
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String, BackendError>;

    /// Handles that cannot take concurrent calls return true.
    fn single_flight(&self) -> bool {
        false
    }
}

pub trait DetectorBackend: Send + Sync {
    /// Detections for `prompt`. Order and truncation are enforced by [`BackendSet`].
    fn detect(&self, image: &ImageRef, prompt: &str, max_candidates: usize) -> Result<Vec<Candidate>, BackendError>;

    fn single_flight(&self) -> bool {
        false
    }
}

pub trait ScorerBackend: Send + Sync {
    /// Raw similarity of the region against each text, in input order.
    fn score_texts(&self, image: &ImageRef, bbox: &BBox, texts: &[String]) -> Result<Vec<f64>, BackendError>;

    fn single_flight(&self) -> bool {
        false
    }
}

/// The three backend handles used by one engine.
#[derive(Clone)]
pub struct BackendSet {
    llm: Arc<dyn LlmBackend>,
    detector: Arc<dyn DetectorBackend>,
    scorer: Arc<dyn ScorerBackend>,
    gates: Arc<[Mutex<()>; 3]>,
}

impl std::fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendSet").finish_non_exhaustive()
    }
}

fn gate<'a>(lock: &'a Mutex<()>, single_flight: bool) -> Option<MutexGuard<'a, ()>> {
    single_flight.then(|| lock.lock().unwrap_or_else(|p| p.into_inner()))
}

impl BackendSet {
    pub fn new(llm: Arc<dyn LlmBackend>, detector: Arc<dyn DetectorBackend>, scorer: Arc<dyn ScorerBackend>) -> Self {
        Self { llm, detector, scorer, gates: Arc::new(Default::default()) }
    }

    pub fn with_llm(&self, llm: Arc<dyn LlmBackend>) -> Self {
        Self { llm, ..self.clone() }
    }

    pub fn llm_complete(&self, system: &str, user: &str) -> Result<String, BackendError> {
        if system.trim().is_empty() || user.trim().is_empty() {
            return Err(BackendError::InvalidRequest { service: "llm", detail: "empty prompt".into() });
        }
        let _g = gate(&self.gates[0], self.llm.single_flight());
        self.llm.complete(system, user)
    }

    /// Detections sorted by descending confidence (ties by id) and truncated.
    pub fn detect(
        &self,
        image: &ImageRef,
        prompt: &str,
        max_candidates: usize,
    ) -> Result<Vec<Candidate>, BackendError> {
        if prompt.trim().is_empty() || max_candidates == 0 {
            return Err(BackendError::InvalidRequest {
                service: "detector",
                detail: "prompt must be non-empty and max_candidates >= 1".into(),
            });
        }
        let mut found = {
            let _g = gate(&self.gates[1], self.detector.single_flight());
            self.detector.detect(image, prompt, max_candidates)?
        };
        let mut seen = HashSet::new();
        if let Some(dup) = found.iter().find(|c| !seen.insert(c.id)) {
            return Err(BackendError::Protocol {
                service: "detector",
                detail: format!("duplicate candidate id {}", dup.id),
            });
        }
        found.sort_by(|a, b| b.detector_confidence.total_cmp(&a.detector_confidence).then(a.id.cmp(&b.id)));
        found.truncate(max_candidates);
        Ok(found)
    }

    pub fn score_region(&self, image: &ImageRef, bbox: &BBox, prompt: &str) -> Result<f64, BackendError> {
        let scores = self.score_texts(image, bbox, &[prompt.to_string()])?;
        Ok(scores[0])
    }

    pub fn score_texts(&self, image: &ImageRef, bbox: &BBox, texts: &[String]) -> Result<Vec<f64>, BackendError> {
        if texts.is_empty() || texts.iter().any(|t| t.trim().is_empty()) {
            return Err(BackendError::InvalidRequest { service: "scorer", detail: "empty text".into() });
        }
        let scores = {
            let _g = gate(&self.gates[2], self.scorer.single_flight());
            self.scorer.score_texts(image, bbox, texts)?
        };
        if scores.len() != texts.len() {
            return Err(BackendError::Protocol {
                service: "scorer",
                detail: format!("{} scores for {} texts", scores.len(), texts.len()),
            });
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(BackendError::Protocol { service: "scorer", detail: format!("non-finite score {bad}") });
        }
        Ok(scores)
    }
}
