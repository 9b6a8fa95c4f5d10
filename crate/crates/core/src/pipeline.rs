//! End-to-end inference for one (image, phrase) query.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSet};
use crate::fusion::fuse_with_epsilon;
use crate::grammar::{FieldKind, FlmParser, ParsedSemantics, StructuredDescription};
use crate::interpreters::{
    geometry_of, interpret_text_factor, interpret_type, location_relevance, FactorScores, InterpretError, SigmaKind,
    TextFactorSettings,
};
use crate::prompting::{build_system_prompt, PromptError, PromptTemplates, TextFactor};
use crate::trace::{Trace, TraceEntry};
use crate::types::{Candidate, ImageRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Candidates come from the grounding detector.
    Detection,
    /// Candidates are given; only the linking decision is made.
    Association,
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("association queries need at least one given candidate")]
    NoGivenCandidates,
    #[error("given candidate ids must be unique (duplicate {0})")]
    DuplicateCandidate(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub image: ImageRef,
    pub phrase: String,
    pub mode: QueryMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub given_candidates: Option<Vec<Candidate>>,
}

impl Query {
    pub fn detection(image: ImageRef, phrase: impl Into<String>) -> Self {
        Self { image, phrase: phrase.into(), mode: QueryMode::Detection, given_candidates: None }
    }

    pub fn association(image: ImageRef, phrase: impl Into<String>, given: Vec<Candidate>) -> Result<Self, QueryError> {
        if given.is_empty() {
            return Err(QueryError::NoGivenCandidates);
        }
        let mut ids = std::collections::HashSet::new();
        if let Some(dup) = given.iter().find(|c| !ids.insert(c.id)) {
            return Err(QueryError::DuplicateCandidate(dup.id));
        }
        Ok(Self { image, phrase: phrase.into(), mode: QueryMode::Association, given_candidates: Some(given) })
    }

    /// Fields requested from the LLM. Association mode has no type question.
    pub fn fields(&self) -> &'static [FieldKind] {
        match self.mode {
            QueryMode::Detection => &FieldKind::ALL,
            QueryMode::Association => &FieldKind::ALL[1..],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub sigma: SigmaKind,
    pub ensemble_weight: f64,
    pub temperature: f64,
    pub epsilon: f64,
    pub max_candidates: usize,
    /// Detections below this confidence are dropped before scoring.
    pub detector_threshold: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            sigma: SigmaKind::Squared,
            ensemble_weight: 0.05,
            temperature: 1.0,
            epsilon: crate::fusion::DEFAULT_EPSILON,
            max_candidates: 10,
            detector_threshold: 0.0,
        }
    }
}

impl EngineConfig {
    fn text_settings(&self) -> TextFactorSettings {
        TextFactorSettings {
            ensemble_weight: self.ensemble_weight,
            temperature: self.temperature,
            epsilon: self.epsilon,
            max_candidates: self.max_candidates,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prompt,
    Llm,
    Detect,
    Location,
    Visual,
    Relation,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid query: {0}")]
    Query(#[from] QueryError),
    #[error("building prompts: {0}")]
    Prompt(#[from] PromptError),
    #[error("{stage:?} stage: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error("{stage:?} stage: {source}")]
    Interpret {
        stage: Stage,
        #[source]
        source: InterpretError,
    },
}

impl PipelineError {
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            PipelineError::Backend { .. } | PipelineError::Interpret { source: InterpretError::Backend(_), .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub rank: usize,
    pub candidate: Candidate,
    pub log_score: f64,
    pub factors: FactorScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub ranked: Vec<RankedCandidate>,
    pub parsed: ParsedSemantics,
    pub no_answer: bool,
    pub trace: Trace,
}

impl Answer {
    pub fn best(&self) -> Option<&RankedCandidate> {
        self.ranked.first()
    }

    pub fn truncate(&mut self, k: usize) {
        self.ranked.truncate(k);
    }
}

/// Immutable configuration shared across queries.
#[derive(Debug, Clone, Default)]
pub struct Engine {
    pub parser: FlmParser,
    pub templates: PromptTemplates,
    pub config: EngineConfig,
}

impl Engine {
    pub fn new(parser: FlmParser, templates: PromptTemplates, config: EngineConfig) -> Self {
        Self { parser, templates, config }
    }

    pub fn with_config(config: EngineConfig) -> Self {
        Self { config, ..Self::default() }
    }

    /// Asks the LLM for each field of `query` and parses the responses.
    pub fn describe(
        &self,
        query: &Query,
        backends: &BackendSet,
        trace: &mut Trace,
    ) -> Result<ParsedSemantics, PipelineError> {
        let system = build_system_prompt();
        trace.system_prompt = system.clone();
        let mut raw: BTreeMap<FieldKind, String> = BTreeMap::new();
        for &kind in query.fields() {
            let prompt = self.templates.instance(kind, &query.phrase)?;
            let response = backends
                .llm_complete(&system, &prompt)
                .map_err(|source| PipelineError::Backend { stage: Stage::Llm, source })?;
            trace.push(TraceEntry::Llm { field: kind, prompt, response: response.clone() });
            raw.insert(kind, response);
        }
        let field = |k| raw.get(&k).cloned().unwrap_or_default();
        let s = StructuredDescription::new(
            field(FieldKind::ObjectType),
            field(FieldKind::SpatialLocation),
            field(FieldKind::VisualPattern),
            field(FieldKind::ObjectRelation),
        );
        Ok(self.parser.parse(&s))
    }

    pub fn infer(&self, query: &Query, backends: &BackendSet) -> Result<Answer, PipelineError> {
        let mut trace = Trace::default();
        let parsed = self.describe(query, backends, &mut trace)?;
        let cfg = &self.config;

        let hypotheses: Vec<(Candidate, FactorScores)> = match query.mode {
            QueryMode::Detection => {
                // Without a parsed type the whole phrase is the detection prompt.
                let prompt = parsed.object_type.clone().unwrap_or_else(|| query.phrase.trim().to_lowercase());
                interpret_type(&prompt, &query.image, backends, cfg.max_candidates, cfg.detector_threshold, &mut trace)
                    .map_err(|source| PipelineError::Backend { stage: Stage::Detect, source })?
                    .into_iter()
                    .map(|(c, p)| {
                        let id = c.id;
                        (c, FactorScores::new(id, p.clamp(cfg.epsilon, 1.0)))
                    })
                    .collect()
            }
            QueryMode::Association => query
                .given_candidates
                .as_deref()
                .ok_or(QueryError::NoGivenCandidates)?
                .iter()
                .map(|c| {
                    let mut f = FactorScores::new(c.id, 1.0);
                    f.skip(FieldKind::ObjectType);
                    (c.clone(), f)
                })
                .collect(),
        };

        if hypotheses.is_empty() {
            return Ok(Answer { ranked: Vec::new(), parsed, no_answer: true, trace });
        }
        let (candidates, mut factors): (Vec<Candidate>, Vec<FactorScores>) = hypotheses.into_iter().unzip();

        if let Some(terms) = &parsed.location {
            for (c, f) in candidates.iter().zip(factors.iter_mut()) {
                let p = location_relevance(terms, &geometry_of(c), cfg.sigma, self.parser.dict(), cfg.epsilon)
                    .map_err(|source| PipelineError::Interpret { stage: Stage::Location, source })?;
                f.set(FieldKind::SpatialLocation, p);
            }
        }

        let settings = cfg.text_settings();
        for (kind, component, stage) in [
            (TextFactor::Visual, &parsed.visual, Stage::Visual),
            (TextFactor::Relation, &parsed.relation, Stage::Relation),
        ] {
            let Some(component) = component else { continue };
            let scores = interpret_text_factor(
                parsed.object_type.as_deref(),
                component,
                kind,
                &candidates,
                &query.image,
                backends,
                &settings,
                &mut trace,
            )
            .map_err(|source| match source {
                InterpretError::Backend(source) => PipelineError::Backend { stage, source },
                source => PipelineError::Interpret { stage, source },
            })?;
            for f in factors.iter_mut() {
                if let Some(&p) = scores.scores.get(&f.candidate_id) {
                    f.set(kind.field(), p);
                }
            }
        }

        let posteriors = fuse_with_epsilon(&factors, cfg.epsilon);
        let ranked = posteriors
            .into_iter()
            .map(|p| {
                let i = candidates.iter().position(|c| c.id == p.candidate_id).expect("fused ids come from candidates");
                RankedCandidate {
                    rank: p.rank,
                    candidate: candidates[i].clone(),
                    log_score: p.log_score,
                    factors: factors[i].clone(),
                }
            })
            .collect();
        Ok(Answer { ranked, parsed, no_answer: false, trace })
    }
}
