//! Per-candidate probability factors.
//!
//! - type: the grounding detector's confidence for the parsed object type;
//! - location: a product of per-term relevance scores over the box geometry;
//! - visual / relation: region-text similarities, softmax-normalized across
//!   candidates and optionally blended with the detector's per-prompt score.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSet};
use crate::grammar::{Axis, FieldKind, Polarity, SpatialTermDict};
use crate::prompting::{compose_scoring_prompt, PromptError, TextFactor};
use crate::trace::{Trace, TraceEntry};
use crate::types::{BBox, Candidate, ImageRef};

/// Minimum IoU for a re-scored detection to count as the same object.
pub const ENSEMBLE_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("sigma input {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("unknown spatial term {0:?}")]
    UnknownTerm(String),
    #[error("no candidates to score")]
    NoCandidates,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Normalized box center and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub horizontal: f64,
    pub vertical: f64,
    pub size: f64,
}

impl Geometry {
    pub fn of_box(b: &BBox) -> Self {
        Self {
            horizontal: (b.x_min() + b.x_max()) / 2.0,
            vertical: (b.y_min() + b.y_max()) / 2.0,
            size: (b.width() * b.height()).sqrt(),
        }
    }
}

pub fn geometry_of(c: &Candidate) -> Geometry {
    Geometry::of_box(&c.bbox)
}

/// Monotone map `[0, 1] -> [0, 1]` with fixed endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaKind {
    Linear,
    #[default]
    Squared,
    Cubic,
    Exponential,
}

impl SigmaKind {
    pub const ALL: [SigmaKind; 4] = [SigmaKind::Linear, SigmaKind::Squared, SigmaKind::Cubic, SigmaKind::Exponential];
}

impl FromStr for SigmaKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "absolute" => Ok(SigmaKind::Linear),
            "squared" => Ok(SigmaKind::Squared),
            "cubic" => Ok(SigmaKind::Cubic),
            "exponential" => Ok(SigmaKind::Exponential),
            other => Err(format!("unknown sigma kind {other:?}")),
        }
    }
}

impl fmt::Display for SigmaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SigmaKind::Linear => "linear",
            SigmaKind::Squared => "squared",
            SigmaKind::Cubic => "cubic",
            SigmaKind::Exponential => "exponential",
        })
    }
}

pub fn sigma(v: f64, kind: SigmaKind) -> Result<f64, InterpretError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(InterpretError::OutOfRange(v));
    }
    Ok(match kind {
        SigmaKind::Linear => v,
        SigmaKind::Squared => v * v,
        SigmaKind::Cubic => v * v * v,
        SigmaKind::Exponential => v.exp_m1() / 1.0_f64.exp_m1(),
    })
}

/// Relevance of one canonical term for a box.
pub fn axis_relevance(
    term: &str,
    g: &Geometry,
    kind: SigmaKind,
    dict: &SpatialTermDict,
) -> Result<f64, InterpretError> {
    let sense = dict.sense(term).ok_or_else(|| InterpretError::UnknownTerm(term.to_string()))?;
    let directional = |value: f64| match sense.polarity {
        Polarity::Positive => sigma(value, kind),
        Polarity::Negative => sigma(1.0 - value, kind),
    };
    let centrality = |value: f64| sigma((1.0 - 2.0 * (value - 0.5).abs()).clamp(0.0, 1.0), kind);
    match sense.axis {
        Axis::Horizontal => directional(g.horizontal),
        Axis::Vertical => directional(g.vertical),
        Axis::Size => directional(g.size),
        Axis::Center { vertical: false } => centrality(g.horizontal),
        Axis::Center { vertical: true } => Ok(centrality(g.horizontal)? * centrality(g.vertical)?),
    }
}

/// Product of [`axis_relevance`] over the given terms, clamped below at `epsilon`.
/// Axes no term mentions contribute nothing.
pub fn location_relevance(
    terms: &[String],
    g: &Geometry,
    kind: SigmaKind,
    dict: &SpatialTermDict,
    epsilon: f64,
) -> Result<f64, InterpretError> {
    let mut product = 1.0;
    for term in terms {
        product *= axis_relevance(term, g, kind, dict)?;
    }
    Ok(product.max(epsilon))
}

/// The four factor values for one candidate. Skipped kinds hold exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorScores {
    pub candidate_id: u32,
    #[serde(rename = "type")]
    pub p_type: f64,
    #[serde(rename = "location")]
    pub p_loc: f64,
    #[serde(rename = "visual")]
    pub p_vis: f64,
    #[serde(rename = "relation")]
    pub p_rel: f64,
    pub skipped: BTreeSet<FieldKind>,
}

impl FactorScores {
    /// A candidate with a type factor and every other kind skipped.
    pub fn new(candidate_id: u32, p_type: f64) -> Self {
        Self {
            candidate_id,
            p_type,
            p_loc: 1.0,
            p_vis: 1.0,
            p_rel: 1.0,
            skipped: [FieldKind::SpatialLocation, FieldKind::VisualPattern, FieldKind::ObjectRelation]
                .into_iter()
                .collect(),
        }
    }

    pub fn get(&self, kind: FieldKind) -> f64 {
        match kind {
            FieldKind::ObjectType => self.p_type,
            FieldKind::SpatialLocation => self.p_loc,
            FieldKind::VisualPattern => self.p_vis,
            FieldKind::ObjectRelation => self.p_rel,
        }
    }

    pub fn set(&mut self, kind: FieldKind, value: f64) {
        match kind {
            FieldKind::ObjectType => self.p_type = value,
            FieldKind::SpatialLocation => self.p_loc = value,
            FieldKind::VisualPattern => self.p_vis = value,
            FieldKind::ObjectRelation => self.p_rel = value,
        }
        self.skipped.remove(&kind);
    }

    pub fn skip(&mut self, kind: FieldKind) {
        self.set(kind, 1.0);
        self.skipped.insert(kind);
    }

    pub fn values(&self) -> [f64; 4] {
        [self.p_type, self.p_loc, self.p_vis, self.p_rel]
    }
}

/// Detects `object_type` and returns each candidate with its type factor.
/// Detections below `threshold` are dropped.
pub fn interpret_type(
    object_type: &str,
    image: &ImageRef,
    backends: &BackendSet,
    max_candidates: usize,
    threshold: f64,
    trace: &mut Trace,
) -> Result<Vec<(Candidate, f64)>, BackendError> {
    let found = backends.detect(image, object_type, max_candidates)?;
    trace.push(TraceEntry::Detect { prompt: object_type.to_string(), returned: found.len() });
    Ok(found
        .into_iter()
        .filter(|c| c.detector_confidence >= threshold)
        .map(|c| {
            let p = c.detector_confidence;
            (c, p)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextFactorSettings {
    /// Weight of the detector's per-prompt score in the blend.
    pub ensemble_weight: f64,
    pub temperature: f64,
    pub epsilon: f64,
    pub max_candidates: usize,
}

impl Default for TextFactorSettings {
    fn default() -> Self {
        Self { ensemble_weight: 0.05, temperature: 1.0, epsilon: 1e-6, max_candidates: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TextFactorScores {
    pub prompt: String,
    pub scores: BTreeMap<u32, f64>,
    /// Candidates whose region could not be scored; their factor is skipped.
    pub skipped: BTreeSet<u32>,
}

/// Softmax with temperature, shifted by the maximum for stability.
pub fn softmax(raw: &[f64], temperature: f64) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Visual-pattern or relation factor for every candidate.
///
/// Transport failures propagate. Any other per-candidate scorer failure skips
/// the factor for that candidate.
#[allow(clippy::too_many_arguments)]
pub fn interpret_text_factor(
    object_type: Option<&str>,
    component: &str,
    kind: TextFactor,
    candidates: &[Candidate],
    image: &ImageRef,
    backends: &BackendSet,
    settings: &TextFactorSettings,
    trace: &mut Trace,
) -> Result<TextFactorScores, InterpretError> {
    if candidates.is_empty() {
        return Err(InterpretError::NoCandidates);
    }
    let prompt = compose_scoring_prompt(object_type, component, kind)?;

    let mut scored: Vec<(u32, f64)> = Vec::with_capacity(candidates.len());
    let mut skipped = BTreeSet::new();
    for c in candidates {
        match backends.score_region(image, &c.bbox, &prompt) {
            Ok(raw) => {
                trace.push(TraceEntry::Score {
                    prompt: prompt.clone(),
                    candidate_id: c.id,
                    raw: Some(raw),
                    error: None,
                });
                scored.push((c.id, raw));
            }
            Err(e) if e.is_transport() => return Err(e.into()),
            Err(e) => {
                warn!("{kind:?} factor skipped for candidate {}: {e}", c.id);
                trace.push(TraceEntry::Score {
                    prompt: prompt.clone(),
                    candidate_id: c.id,
                    raw: None,
                    error: Some(e.to_string()),
                });
                skipped.insert(c.id);
            }
        }
    }

    let w = settings.ensemble_weight;
    let detector_scores: BTreeMap<u32, f64> = if w > 0.0 && !scored.is_empty() {
        let dets = backends.detect(image, &prompt, settings.max_candidates)?;
        trace.push(TraceEntry::Detect { prompt: prompt.clone(), returned: dets.len() });
        candidates
            .iter()
            .map(|c| {
                let best = dets
                    .iter()
                    .filter(|d| d.bbox.iou(&c.bbox) > ENSEMBLE_MATCH_IOU)
                    .map(|d| d.detector_confidence)
                    .fold(0.0, f64::max);
                (c.id, best)
            })
            .collect()
    } else {
        BTreeMap::new()
    };

    let raw: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
    let probs = softmax(&raw, settings.temperature);
    let scores = scored
        .iter()
        .zip(probs)
        .map(|(&(id, _), p)| {
            let det = detector_scores.get(&id).copied().unwrap_or(0.0);
            let blended = (1.0 - w) * p + w * det;
            (id, blended.clamp(settings.epsilon, 1.0))
        })
        .collect();
    Ok(TextFactorScores { prompt, scores, skipped })
}
