//! Synthetic scenes with ground-truth attributes, exact oracle backends built
//! from them, and a direct-formula ranking used as an independent check on the
//! pipeline.
//!
//! Scenes are abstract: an [`ImageRef`] carries `synth://scene-<seed>` and the
//! oracle backends resolve it. No pixels are involved.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::mock::{SceneScript, ScriptedBox};
use crate::backends::{BackendError, BackendSet, DetectorBackend, MockScript, ScorerBackend, ScriptedLlm};
use crate::eval::{EvalRecord, GroundTruth};
use crate::grammar::{FieldKind, FlmParser, ParsedSemantics, StructuredDescription};
use crate::interpreters::SigmaKind;
use crate::pipeline::EngineConfig;
use crate::prompting::{compose_scoring_prompt, PromptTemplates, TextFactor};
use crate::types::{BBox, Candidate, ImageRef};

pub const OBJECT_TYPES: [&str; 6] = ["car", "person", "dog", "chair", "bottle", "bicycle"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "black", "white", "yellow"];
pub const RELATIONS: [&str; 4] = ["beside the tree", "under the umbrella", "on the bench", "by the wall"];
pub const LOCATION_TERMS: [&str; 9] = ["left", "right", "top", "bottom", "center", "middle", "close", "near", "far"];

pub const IMAGE_WIDTH: u32 = 640;
pub const IMAGE_HEIGHT: u32 = 480;

/// The target's squared-sigma location relevance must beat every distractor's by this factor.
pub const LOCATION_MARGIN: f64 = 1.25;
const CENTER_RANGE: (f64, f64) = (0.25, 0.75);
const SIDE_RANGE: (f64, f64) = (0.1, 0.3);
const CONFIDENCE_RANGE: (f64, f64) = (0.8, 0.95);
const UNIFORM_SCORE: f64 = 0.5;
const MAX_LAYOUT_ATTEMPTS: usize = 20_000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scenes need 2..=10 objects, got {0}")]
    ObjectCount(usize),
    #[error("no layout satisfying the location margin after {0} attempts")]
    Layout(usize),
    #[error("invalid scene: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Redundancy {
    /// Every distractor differs from the target in at least two of
    /// type/color/relation, besides being less extreme for the location term.
    #[serde(rename = "any3of4")]
    Any3Of4,
    /// Every distractor differs in at least one of type/color/relation.
    #[serde(rename = "minimal")]
    Minimal,
}

impl Redundancy {
    fn required_differences(self) -> usize {
        match self {
            Redundancy::Any3Of4 => 2,
            Redundancy::Minimal => 1,
        }
    }
}

impl FromStr for Redundancy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "any3of4" => Ok(Redundancy::Any3Of4),
            "minimal" => Ok(Redundancy::Minimal),
            other => Err(format!("unknown redundancy mode {other:?} (any3of4 | minimal)")),
        }
    }
}

/// Which attributes besides the type the phrase mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mentions {
    pub location: bool,
    pub color: bool,
    pub relation: bool,
}

impl Default for Mentions {
    fn default() -> Self {
        Self { location: true, color: true, relation: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    #[serde(rename = "type")]
    pub object_type: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub color: String,
    pub relation: String,
    pub confidence: f64,
}

impl SceneObject {
    pub fn candidate(&self) -> Candidate {
        Candidate::new(self.id, self.bbox, self.confidence).expect("scene confidences lie in [0, 1]")
    }

    fn categorical_differences(&self, other: &SceneObject) -> usize {
        usize::from(self.object_type != other.object_type)
            + usize::from(self.color != other.color)
            + usize::from(self.relation != other.relation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub target_id: u32,
    pub location_term: String,
    pub mentions: Mentions,
    pub phrase: String,
}

impl SceneSpec {
    pub fn scene_id(&self) -> String {
        format!("scene-{:05}", self.seed)
    }

    pub fn uri(&self) -> String {
        format!("synth://{}", self.scene_id())
    }

    pub fn image(&self) -> ImageRef {
        ImageRef::new(self.uri(), IMAGE_WIDTH, IMAGE_HEIGHT).expect("fixed positive size")
    }

    pub fn target(&self) -> &SceneObject {
        self.objects.iter().find(|o| o.id == self.target_id).expect("validated scene has its target")
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Objects matching the target on type, color and relation.
    pub fn full_matches(&self) -> Vec<u32> {
        let t = self.target();
        self.objects
            .iter()
            .filter(|o| o.object_type == t.object_type && o.color == t.color && o.relation == t.relation)
            .map(|o| o.id)
            .collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        let ids: BTreeSet<u32> = self.objects.iter().map(|o| o.id).collect();
        if ids.len() != self.objects.len() {
            return bad("duplicate object ids".into());
        }
        if !ids.contains(&self.target_id) {
            return bad(format!("target {} is not an object", self.target_id));
        }
        if !LOCATION_TERMS.contains(&self.location_term.as_str()) {
            return bad(format!("unknown location term {:?}", self.location_term));
        }
        if self.objects.iter().any(|o| !(0.0..=1.0).contains(&o.confidence)) {
            return bad("confidence outside [0, 1]".into());
        }
        if self.full_matches() != vec![self.target_id] {
            return bad("target attributes are not unique".into());
        }
        Ok(())
    }

    pub fn detection_record(&self) -> EvalRecord {
        EvalRecord {
            record_id: self.scene_id(),
            image: self.image(),
            phrase: self.phrase.clone(),
            truth: GroundTruth::Box { gt_box: self.target().bbox },
        }
    }

    pub fn association_record(&self) -> EvalRecord {
        EvalRecord {
            record_id: self.scene_id(),
            image: self.image(),
            phrase: self.phrase.clone(),
            truth: GroundTruth::Candidate {
                gt_candidate_id: self.target_id,
                candidates: self.objects.iter().map(SceneObject::candidate).collect(),
            },
        }
    }

    /// Clean oracle responses in the order type, location, visual, relation.
    pub fn responses(&self) -> StructuredDescription {
        let t = self.target();
        let tag = |on: bool, v: &str| if on { format!("#{}", capitalize(v)) } else { "#None".to_string() };
        StructuredDescription::new(
            format!("#{}", capitalize(&t.object_type)),
            tag(self.mentions.location, &self.location_term),
            tag(self.mentions.color, &t.color),
            if self.mentions.relation { format!("#{}", t.relation) } else { "#None".to_string() },
        )
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn location_phrase(term: &str) -> String {
    match term {
        "left" | "right" => format!("on the {term}"),
        "top" | "bottom" => format!("at the {term}"),
        "center" | "middle" => format!("in the {term}"),
        "close" => "close to the camera".into(),
        "near" => "near the camera".into(),
        _ => "far from the camera".into(),
    }
}

fn build_phrase(target: &SceneObject, term: &str, mentions: Mentions) -> String {
    let mut words = vec!["the".to_string()];
    if mentions.color {
        words.push(target.color.clone());
    }
    words.push(target.object_type.clone());
    if mentions.relation {
        words.push(target.relation.clone());
    }
    if mentions.location {
        words.push(location_phrase(term));
    }
    words.join(" ")
}

fn oracle_sigma(v: f64, kind: SigmaKind) -> f64 {
    match kind {
        SigmaKind::Linear => v,
        SigmaKind::Squared => v.powi(2),
        SigmaKind::Cubic => v.powi(3),
        SigmaKind::Exponential => (v.exp() - 1.0) / (std::f64::consts::E - 1.0),
    }
}

/// Location relevance by direct formula, written independently of the interpreters.
pub fn oracle_relevance(term: &str, b: &BBox, kind: SigmaKind) -> f64 {
    let cx = (b.x_min() + b.x_max()) / 2.0;
    let cy = (b.y_min() + b.y_max()) / 2.0;
    let size = (b.width() * b.height()).sqrt();
    let s = |v: f64| oracle_sigma(v, kind);
    let centrality = |v: f64| s(1.0 - 2.0 * (v - 0.5).abs());
    match term {
        "left" => s(1.0 - cx),
        "right" => s(cx),
        "top" => s(1.0 - cy),
        "bottom" => s(cy),
        "center" => centrality(cx),
        "middle" => centrality(cx) * centrality(cy),
        "close" | "near" => s(size),
        "far" => s(1.0 - size),
        other => panic!("oracle has no formula for {other:?}"),
    }
}

/// Deterministic object count for scene `seed` in a batch: 2..=10.
pub fn scene_size_for_seed(seed: u64) -> usize {
    2 + (seed % 9) as usize
}

pub fn generate_scene(seed: u64, n_objects: usize, redundancy: Redundancy) -> Result<SceneSpec, SynthError> {
    generate_scene_with(seed, n_objects, redundancy, Mentions::default())
}

pub fn generate_scene_with(
    seed: u64,
    n_objects: usize,
    redundancy: Redundancy,
    mentions: Mentions,
) -> Result<SceneSpec, SynthError> {
    if !(2..=10).contains(&n_objects) {
        return Err(SynthError::ObjectCount(n_objects));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&str]| xs[rng.gen_range(0..xs.len())].to_string();
    let placeholder = BBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box");

    let term = pick(&mut rng, &LOCATION_TERMS);
    let target = SceneObject {
        id: 0,
        object_type: pick(&mut rng, &OBJECT_TYPES),
        bbox: placeholder,
        color: pick(&mut rng, &COLORS),
        relation: pick(&mut rng, &RELATIONS),
        confidence: 0.0,
    };
    let mut objects = vec![target];
    while objects.len() < n_objects {
        let same_type = rng.gen_bool(0.5);
        let object_type = if same_type {
            objects[0].object_type.clone()
        } else {
            let others: Vec<&str> = OBJECT_TYPES.iter().copied().filter(|t| *t != objects[0].object_type).collect();
            pick(&mut rng, &others)
        };
        let candidate = SceneObject {
            id: 0,
            object_type,
            bbox: placeholder,
            color: pick(&mut rng, &COLORS),
            relation: pick(&mut rng, &RELATIONS),
            confidence: 0.0,
        };
        if candidate.categorical_differences(&objects[0]) >= redundancy.required_differences() {
            objects.push(candidate);
        }
    }

    let boxes = layout(&mut rng, n_objects, &term)?;
    for (o, b) in objects.iter_mut().zip(boxes) {
        o.bbox = b;
        o.confidence = rng.gen_range(CONFIDENCE_RANGE.0..=CONFIDENCE_RANGE.1);
    }

    let mut ids: Vec<u32> = (0..n_objects as u32).collect();
    ids.shuffle(&mut rng);
    for (o, id) in objects.iter_mut().zip(&ids) {
        o.id = *id;
    }
    let target_id = objects[0].id;
    objects.sort_by_key(|o| o.id);

    let phrase = {
        let t = objects.iter().find(|o| o.id == target_id).expect("target kept");
        build_phrase(t, &term, mentions)
    };
    let scene = SceneSpec { seed, objects, target_id, location_term: term, mentions, phrase };
    scene.validate()?;
    Ok(scene)
}

fn sample_box(rng: &mut ChaCha8Rng, cx: (f64, f64), cy: (f64, f64), side: (f64, f64)) -> BBox {
    let cx = rng.gen_range(cx.0..=cx.1);
    let cy = rng.gen_range(cy.0..=cy.1);
    let w = rng.gen_range(side.0..=side.1);
    let h = rng.gen_range(side.0..=side.1);
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0).expect("inside the unit square")
}

/// Target box near the favourable end of the sampling ranges for `term`.
fn target_box(rng: &mut ChaCha8Rng, term: &str) -> BBox {
    let (lo, hi) = CENTER_RANGE;
    let full = CENTER_RANGE;
    let low_end = (lo, lo + 0.03);
    let high_end = (hi - 0.03, hi);
    let mid = (0.49, 0.51);
    match term {
        "left" => sample_box(rng, low_end, full, SIDE_RANGE),
        "right" => sample_box(rng, high_end, full, SIDE_RANGE),
        "top" => sample_box(rng, full, low_end, SIDE_RANGE),
        "bottom" => sample_box(rng, full, high_end, SIDE_RANGE),
        "center" => sample_box(rng, mid, full, SIDE_RANGE),
        "middle" => sample_box(rng, mid, mid, SIDE_RANGE),
        "close" | "near" => sample_box(rng, full, full, (SIDE_RANGE.1 - 0.03, SIDE_RANGE.1)),
        _ => sample_box(rng, full, full, (SIDE_RANGE.0, SIDE_RANGE.0 + 0.01)),
    }
}

/// Target box first, then distractors each at least [`LOCATION_MARGIN`] less relevant.
fn layout(rng: &mut ChaCha8Rng, n: usize, term: &str) -> Result<Vec<BBox>, SynthError> {
    let rel = |b: &BBox| oracle_relevance(term, b, SigmaKind::Squared);
    let target = target_box(rng, term);
    let ceiling = rel(&target) / LOCATION_MARGIN;
    let mut boxes = vec![target];
    let mut attempts = 0;
    while boxes.len() < n {
        attempts += 1;
        if attempts > MAX_LAYOUT_ATTEMPTS {
            return Err(SynthError::Layout(MAX_LAYOUT_ATTEMPTS));
        }
        let b = sample_box(rng, CENTER_RANGE, CENTER_RANGE, SIDE_RANGE);
        if rel(&b) <= ceiling {
            boxes.push(b);
        }
    }
    Ok(boxes)
}

/// A batch of `count` scenes with seeds `first_seed..first_seed + count`.
pub fn generate_batch(first_seed: u64, count: usize, redundancy: Redundancy) -> Result<Vec<SceneSpec>, SynthError> {
    (0..count as u64)
        .map(|i| {
            let seed = first_seed + i;
            generate_scene(seed, scene_size_for_seed(seed), redundancy)
        })
        .collect()
}

/// Failure injected into oracle backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Corruption {
    #[default]
    None,
    /// The response for this field loses its `#`.
    MissingHash(FieldKind),
    /// The response for this field carries an explanatory tail.
    Verbose(FieldKind),
    /// The location response names a valid but wrong term.
    WrongSpatialTerm,
    /// The backend behind this factor scores every candidate alike.
    Uniform(FieldKind),
}

/// The term the corrupted oracle answers with instead of `term`.
pub fn wrong_term(term: &str) -> &'static str {
    match term {
        "left" => "right",
        "right" => "left",
        "top" => "bottom",
        "bottom" => "top",
        "center" => "left",
        "middle" => "bottom",
        "close" | "near" => "far",
        _ => "close",
    }
}

fn oracle_responses(scene: &SceneSpec, corruption: Corruption) -> StructuredDescription {
    let clean = scene.responses();
    let mut fields: BTreeMap<FieldKind, String> =
        FieldKind::ALL.iter().map(|&k| (k, clean.get(k).to_string())).collect();
    match corruption {
        Corruption::None => {}
        Corruption::MissingHash(kind) => {
            let v = fields[&kind].replace('#', "");
            fields.insert(kind, v);
        }
        Corruption::Verbose(kind) => {
            let v =
                format!("{}. It is commonly seen in scenes like this one, which explains the answer.", fields[&kind]);
            fields.insert(kind, v);
        }
        Corruption::WrongSpatialTerm => {
            if scene.mentions.location {
                fields.insert(FieldKind::SpatialLocation, format!("#{}", capitalize(wrong_term(&scene.location_term))));
            }
        }
        Corruption::Uniform(FieldKind::SpatialLocation) => {
            fields.insert(FieldKind::SpatialLocation, "#None".into());
        }
        Corruption::Uniform(_) => {}
    }
    StructuredDescription::new(
        fields.remove(&FieldKind::ObjectType).unwrap_or_default(),
        fields.remove(&FieldKind::SpatialLocation).unwrap_or_default(),
        fields.remove(&FieldKind::VisualPattern).unwrap_or_default(),
        fields.remove(&FieldKind::ObjectRelation).unwrap_or_default(),
    )
}

/// Attributes named by a detector or scorer prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptAttributes {
    pub object_type: Option<String>,
    pub color: Option<String>,
    pub relation: Option<String>,
}

impl PromptAttributes {
    pub fn parse(prompt: &str) -> Self {
        let lower = prompt.to_lowercase();
        let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        let find = |vocab: &[&str]| vocab.iter().find(|v| words.contains(v)).map(|v| v.to_string());
        Self {
            object_type: find(&OBJECT_TYPES),
            color: find(&COLORS),
            relation: RELATIONS.iter().find(|r| lower.contains(*r)).map(|r| r.to_string()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.object_type.is_none() && self.color.is_none() && self.relation.is_none()
    }

    /// True when at least one attribute is named and all named ones match.
    pub fn matches(&self, o: &SceneObject) -> bool {
        !self.is_empty()
            && self.object_type.as_ref().is_none_or(|t| *t == o.object_type)
            && self.color.as_ref().is_none_or(|c| *c == o.color)
            && self.relation.as_ref().is_none_or(|r| *r == o.relation)
    }

    fn factor(&self) -> Option<FieldKind> {
        if self.color.is_some() {
            Some(FieldKind::VisualPattern)
        } else if self.relation.is_some() {
            Some(FieldKind::ObjectRelation)
        } else if self.object_type.is_some() {
            Some(FieldKind::ObjectType)
        } else {
            None
        }
    }
}

/// Scenes keyed by URI plus the injected corruption.
#[derive(Debug, Clone)]
pub struct OracleWorld {
    scenes: BTreeMap<String, SceneSpec>,
    corruption: Corruption,
}

impl OracleWorld {
    pub fn new(scenes: &[SceneSpec], corruption: Corruption) -> Self {
        Self { scenes: scenes.iter().map(|s| (s.uri(), s.clone())).collect(), corruption }
    }

    fn scene(&self, image: &ImageRef, service: &'static str) -> Result<&SceneSpec, BackendError> {
        self.scenes.get(&image.uri).ok_or_else(|| BackendError::MissingScript { service, key: image.uri.clone() })
    }

    fn uniform_for(&self, attrs: &PromptAttributes) -> bool {
        matches!(self.corruption, Corruption::Uniform(k) if Some(k) == attrs.factor())
    }

    /// LLM script covering every scene's instance prompts under default templates.
    pub fn llm(&self) -> ScriptedLlm {
        let templates = PromptTemplates::default();
        let mut llm = ScriptedLlm::default();
        for scene in self.scenes.values() {
            let responses = oracle_responses(scene, self.corruption);
            for kind in FieldKind::ALL {
                let prompt = templates.instance(kind, &scene.phrase).expect("generated phrases are valid");
                llm.insert(prompt, responses.get(kind));
            }
        }
        llm
    }

    pub fn backends(&self) -> BackendSet {
        let world = Arc::new(self.clone());
        BackendSet::new(Arc::new(self.llm()), world.clone(), world)
    }
}

impl DetectorBackend for OracleWorld {
    fn detect(&self, image: &ImageRef, prompt: &str, _max: usize) -> Result<Vec<Candidate>, BackendError> {
        let scene = self.scene(image, "detector")?;
        let attrs = PromptAttributes::parse(prompt);
        let found = if self.uniform_for(&attrs) {
            let keep_type = PromptAttributes { object_type: attrs.object_type.clone(), ..Default::default() };
            scene
                .objects
                .iter()
                .filter(|o| {
                    attrs.factor() == Some(FieldKind::ObjectType) || keep_type.is_empty() || keep_type.matches(o)
                })
                .map(|o| Candidate::new(o.id, o.bbox, UNIFORM_SCORE).expect("valid"))
                .collect()
        } else {
            scene.objects.iter().filter(|o| attrs.matches(o)).map(SceneObject::candidate).collect()
        };
        Ok(found)
    }
}

impl ScorerBackend for OracleWorld {
    fn score_texts(&self, image: &ImageRef, bbox: &BBox, texts: &[String]) -> Result<Vec<f64>, BackendError> {
        let scene = self.scene(image, "scorer")?;
        let object = scene.objects.iter().find(|o| o.bbox == *bbox).ok_or_else(|| BackendError::MissingScript {
            service: "scorer",
            key: format!("{} {:?}", image.uri, bbox.to_array()),
        })?;
        Ok(texts
            .iter()
            .map(|t| {
                let attrs = PromptAttributes::parse(t);
                if self.uniform_for(&attrs) {
                    UNIFORM_SCORE
                } else if attrs.matches(object) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect())
    }
}

pub fn oracle_backends(scene: &SceneSpec) -> BackendSet {
    OracleWorld::new(std::slice::from_ref(scene), Corruption::None).backends()
}

pub fn oracle_backends_with(scenes: &[SceneSpec], corruption: Corruption) -> BackendSet {
    OracleWorld::new(scenes, corruption).backends()
}

/// A JSON mock script reproducing the clean oracle for the prompts the default
/// pipeline issues on these scenes, in both query modes.
pub fn mock_script(scenes: &[SceneSpec]) -> MockScript {
    let world = OracleWorld::new(scenes, Corruption::None);
    let parser = FlmParser::default();
    let mut script = MockScript { llm: world.llm().into_map(), scenes: BTreeMap::new() };
    for scene in scenes {
        let parsed = parser.parse(&scene.responses());
        let image = scene.image();
        let mut prompts: Vec<String> = parsed.object_type.iter().cloned().collect();
        for (component, kind) in [(&parsed.visual, TextFactor::Visual), (&parsed.relation, TextFactor::Relation)] {
            if let Some(c) = component {
                for t in [parsed.object_type.as_deref(), None] {
                    prompts.push(compose_scoring_prompt(t, c, kind).expect("non-empty component"));
                }
            }
        }
        let mut entry = SceneScript::default();
        for prompt in prompts {
            let dets = world.detect(&image, &prompt, usize::MAX).expect("scene is known");
            entry.detections.insert(
                prompt.clone(),
                dets.iter()
                    .map(|c| ScriptedBox { id: Some(c.id), bbox: c.bbox, score: c.detector_confidence })
                    .collect(),
            );
            let scores = scene
                .objects
                .iter()
                .map(|o| {
                    let s = world.score_texts(&image, &o.bbox, std::slice::from_ref(&prompt)).expect("known box")[0];
                    ScriptedBox { id: None, bbox: o.bbox, score: s }
                })
                .collect();
            entry.region_scores.insert(prompt, scores);
        }
        script.scenes.insert(scene.uri(), entry);
    }
    script
}

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.to_array();
    let [bx0, by0, bx1, by1] = b.to_array();
    let inter = (ax1.min(bx1) - ax0.max(bx0)).max(0.0) * (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn oracle_softmax(raw: &[f64], temperature: f64) -> Vec<f64> {
    let exps: Vec<f64> = raw.iter().map(|r| (r / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Ranks a scene's objects for `parsed` by plain products of directly
/// evaluated factors, without any pipeline code. Assumes clean oracle backends
/// in detection mode.
pub fn brute_force_answer(scene: &SceneSpec, parsed: &ParsedSemantics, config: &EngineConfig) -> Vec<u32> {
    let prompt = parsed.object_type.clone().unwrap_or_else(|| scene.phrase.to_lowercase());
    let wanted = PromptAttributes::parse(&prompt);
    let mut pool: Vec<&SceneObject> =
        scene.objects.iter().filter(|o| wanted.matches(o) && o.confidence >= config.detector_threshold).collect();
    pool.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.id.cmp(&b.id)));
    pool.truncate(config.max_candidates);
    if pool.is_empty() {
        return Vec::new();
    }

    let eps = config.epsilon;
    let w = config.ensemble_weight;
    let text_factor = |hit: &dyn Fn(&SceneObject) -> bool| -> Vec<f64> {
        let raw: Vec<f64> = pool.iter().map(|o| if hit(o) { 1.0 } else { 0.0 }).collect();
        let soft = oracle_softmax(&raw, config.temperature);
        pool.iter()
            .zip(soft)
            .map(|(o, s)| {
                // Re-detections match any overlapping hit, not only the candidate itself.
                let det = scene
                    .objects
                    .iter()
                    .filter(|d| hit(d) && oracle_iou(&d.bbox, &o.bbox) > 0.5)
                    .map(|d| d.confidence)
                    .fold(0.0, f64::max);
                ((1.0 - w) * s + w * det).clamp(eps, 1.0)
            })
            .collect()
    };
    let ones = vec![1.0; pool.len()];
    let typed = |o: &SceneObject| parsed.object_type.as_ref().is_none_or(|t| *t == o.object_type);
    let p_vis = match &parsed.visual {
        Some(v) => text_factor(&|o: &SceneObject| typed(o) && o.color == *v),
        None => ones.clone(),
    };
    let p_rel = match &parsed.relation {
        Some(r) => text_factor(&|o: &SceneObject| typed(o) && o.relation == *r),
        None => ones.clone(),
    };

    let mut scored: Vec<(u32, f64, f64)> = pool
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let p_type = o.confidence.clamp(eps, 1.0);
            let p_loc = match &parsed.location {
                Some(terms) => {
                    terms.iter().map(|t| oracle_relevance(t, &o.bbox, config.sigma)).product::<f64>().max(eps)
                }
                None => 1.0,
            };
            (o.id, p_type * p_loc * p_vis[i] * p_rel[i], p_type)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|s| s.0).collect()
}
