//! Scripted backends driven by a JSON file.
//!
//! ```json
//! {
//!   "llm": {"<exact user prompt>": "<response>"},
//!   "scenes": {
//!     "<image uri>": {
//!       "detections": {"<prompt>": [{"id": 0, "box": [x0, y0, x1, y1], "score": 0.9}]},
//!       "region_scores": {"<prompt>": [{"box": [x0, y0, x1, y1], "score": 1.0}]}
//!     }
//!   }
//! }
//! ```
//!
//! A known scene with an unknown detection prompt yields no detections. Every
//! other missing entry is a [`BackendError::MissingScript`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendSet, DetectorBackend, LlmBackend, ScorerBackend};
use crate::types::{BBox, Candidate, ImageRef};

const BOX_MATCH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedBox {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    #[serde(default)]
    pub detections: BTreeMap<String, Vec<ScriptedBox>>,
    #[serde(default)]
    pub region_scores: BTreeMap<String, Vec<ScriptedBox>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub llm: BTreeMap<String, String>,
    #[serde(default)]
    pub scenes: BTreeMap<String, SceneScript>,
}

impl MockScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn backends(&self) -> BackendSet {
        BackendSet::new(
            std::sync::Arc::new(ScriptedLlm::new(self.llm.clone())),
            std::sync::Arc::new(ScriptedDetector::new(self.scenes.clone())),
            std::sync::Arc::new(ScriptedScorer::new(self.scenes.clone())),
        )
    }
}

/// LLM keyed by the exact user prompt. The system prompt is not part of the key.
#[derive(Debug, Clone, Default)]
pub struct ScriptedLlm {
    responses: BTreeMap<String, String>,
}

impl ScriptedLlm {
    pub fn new(responses: BTreeMap<String, String>) -> Self {
        Self { responses }
    }

    pub fn insert(&mut self, prompt: impl Into<String>, response: impl Into<String>) {
        self.responses.insert(prompt.into(), response.into());
    }

    pub fn into_map(self) -> BTreeMap<String, String> {
        self.responses
    }
}

impl LlmBackend for ScriptedLlm {
    fn complete(&self, _system: &str, user: &str) -> Result<String, BackendError> {
        self.responses
            .get(user)
            .cloned()
            .ok_or_else(|| BackendError::MissingScript { service: "llm", key: user.to_string() })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedDetector {
    scenes: BTreeMap<String, SceneScript>,
}

impl ScriptedDetector {
    pub fn new(scenes: BTreeMap<String, SceneScript>) -> Self {
        Self { scenes }
    }
}

impl DetectorBackend for ScriptedDetector {
    fn detect(&self, image: &ImageRef, prompt: &str, _max: usize) -> Result<Vec<Candidate>, BackendError> {
        let scene = self
            .scenes
            .get(&image.uri)
            .ok_or_else(|| BackendError::MissingScript { service: "detector", key: image.uri.clone() })?;
        let Some(entries) = scene.detections.get(prompt) else {
            return Ok(Vec::new());
        };
        entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                Candidate::new(e.id.unwrap_or(i as u32), e.bbox, e.score)
                    .map_err(|err| BackendError::Protocol { service: "detector", detail: err.to_string() })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedScorer {
    scenes: BTreeMap<String, SceneScript>,
}

impl ScriptedScorer {
    pub fn new(scenes: BTreeMap<String, SceneScript>) -> Self {
        Self { scenes }
    }

    fn lookup(&self, image: &ImageRef, bbox: &BBox, text: &str) -> Result<f64, BackendError> {
        let missing = || BackendError::MissingScript {
            service: "scorer",
            key: format!("{} {:?} {text}", image.uri, bbox.to_array()),
        };
        let entries = self.scenes.get(&image.uri).and_then(|s| s.region_scores.get(text)).ok_or_else(missing)?;
        entries
            .iter()
            .find(|e| e.bbox.to_array().iter().zip(bbox.to_array()).all(|(a, b)| (a - b).abs() <= BOX_MATCH_TOLERANCE))
            .map(|e| e.score)
            .ok_or_else(missing)
    }
}

impl ScorerBackend for ScriptedScorer {
    fn score_texts(&self, image: &ImageRef, bbox: &BBox, texts: &[String]) -> Result<Vec<f64>, BackendError> {
        texts.iter().map(|t| self.lookup(image, bbox, t)).collect()
    }
}
