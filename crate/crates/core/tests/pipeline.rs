use std::sync::Arc;

use flora::backends::{BackendError, LlmBackend, MockScript};
use flora::eval::{run_eval, EvalOptions};
use flora::pipeline::PipelineError;
use flora::prompting::{compose_scoring_prompt, TextFactor};
use flora::synth::{self, Corruption, Mentions, OracleWorld, Redundancy};
use flora::trace::TraceEntry;
use flora::{BBox, Candidate, Engine, EngineConfig, FieldKind, ImageRef, Query, SigmaKind};
use proptest::prelude::*;
use serde_json::json;

const PHRASE: &str = "the black car on the left";

fn prompt(question: &str) -> String {
    format!("The description of an object in an image is '{PHRASE}'. {question} The answer must start with a #.")
}

fn two_car_script() -> MockScript {
    let v = json!({
        "llm": {
            prompt("Tell me the type of the object described."): "#Car",
            prompt("Tell me the spatial location of the object described. If it is not mentioned, answer None."): "#Left",
            prompt("Tell me the visual patterns of the object described. If they are not mentioned, answer None."): "#Black",
            prompt("Tell me its relation to surrounding objects. If it is not mentioned, answer None."): "#None"
        },
        "scenes": {
            "img://street": {
                "detections": {
                    "car": [
                        {"id": 0, "box": [0.6, 0.3, 0.9, 0.6], "score": 0.9},
                        {"id": 1, "box": [0.1, 0.3, 0.4, 0.6], "score": 0.8}
                    ],
                    "a black car": [{"id": 0, "box": [0.1, 0.3, 0.4, 0.6], "score": 0.7}],
                    "black": [{"id": 0, "box": [0.1, 0.3, 0.4, 0.6], "score": 0.7}]
                },
                "region_scores": {
                    "a black car": [
                        {"box": [0.6, 0.3, 0.9, 0.6], "score": 0.2},
                        {"box": [0.1, 0.3, 0.4, 0.6], "score": 0.9}
                    ],
                    "black": [
                        {"box": [0.6, 0.3, 0.9, 0.6], "score": 0.2},
                        {"box": [0.1, 0.3, 0.4, 0.6], "score": 0.9}
                    ]
                }
            }
        }
    });
    serde_json::from_value(v).unwrap()
}

fn street() -> ImageRef {
    ImageRef::new("img://street", 640, 480).unwrap()
}

#[test]
fn detection_mode_end_to_end() {
    let backends = two_car_script().backends();
    let answer = Engine::default().infer(&Query::detection(street(), PHRASE), &backends).unwrap();
    assert!(!answer.no_answer);
    assert_eq!(answer.best().unwrap().candidate.id, 1);
    assert_eq!(answer.parsed.object_type.as_deref(), Some("car"));
    assert_eq!(answer.parsed.relation, None);

    let left = &answer.ranked[0].factors;
    assert_eq!(left.p_type, 0.8);
    // centre x = 0.25 under the default squared sigma
    assert!((left.p_loc - 0.75f64.powi(2)).abs() < 1e-12);
    assert!(left.skipped.contains(&FieldKind::ObjectRelation));
    let softmax = 0.9f64.exp() / (0.9f64.exp() + 0.2f64.exp());
    assert!((left.p_vis - (0.95 * softmax + 0.05 * 0.7)).abs() < 1e-12);

    let fields: Vec<FieldKind> = answer
        .trace
        .calls
        .iter()
        .filter_map(|c| match c {
            TraceEntry::Llm { field, .. } => Some(*field),
            _ => None,
        })
        .collect();
    assert_eq!(fields, FieldKind::ALL.to_vec());
    assert!(answer.trace.system_prompt.starts_with("You are an assistant"));
}

#[test]
fn association_mode_skips_type() {
    let given = vec![
        Candidate::new(4, BBox::new(0.6, 0.3, 0.9, 0.6).unwrap(), 0.0).unwrap(),
        Candidate::new(9, BBox::new(0.1, 0.3, 0.4, 0.6).unwrap(), 0.0).unwrap(),
    ];
    let backends = two_car_script().backends();
    let query = Query::association(street(), PHRASE, given).unwrap();
    let answer = Engine::default().infer(&query, &backends).unwrap();
    assert_eq!(answer.best().unwrap().candidate.id, 9);
    assert!(answer.ranked.iter().all(|r| r.factors.skipped.contains(&FieldKind::ObjectType)));
    assert_eq!(answer.trace.llm_calls(), 3);
}

#[test]
fn no_detections_is_no_answer() {
    let mut script = two_car_script();
    script.scenes.get_mut("img://street").unwrap().detections.remove("car");
    let answer = Engine::default().infer(&Query::detection(street(), PHRASE), &script.backends()).unwrap();
    assert!(answer.no_answer);
    assert!(answer.ranked.is_empty());
}

struct DownLlm;

impl LlmBackend for DownLlm {
    fn complete(&self, _: &str, user: &str) -> Result<String, BackendError> {
        Err(BackendError::Transport { service: "llm", prompt: user.into(), detail: "connection refused".into() })
    }
}

#[test]
fn llm_outage_is_a_backend_error() {
    let backends = two_car_script().backends().with_llm(Arc::new(DownLlm));
    let err = Engine::default().infer(&Query::detection(street(), PHRASE), &backends).unwrap_err();
    assert!(err.is_backend());
    assert!(matches!(err, PipelineError::Backend { .. }));
}

#[test]
fn parallel_eval_matches_sequential() {
    let scenes = synth::generate_batch(100, 40, Redundancy::Minimal).unwrap();
    let backends = OracleWorld::new(&scenes, Corruption::None).backends();
    let records: Vec<_> = scenes.iter().map(|s| s.detection_record()).collect();
    let engine = Engine::default();
    let one = run_eval(&engine, &backends, &records, EvalOptions { parallelism: 1, strict: true }).unwrap();
    let four = run_eval(&engine, &backends, &records, EvalOptions { parallelism: 4, strict: true }).unwrap();
    assert_eq!(one, four);
    assert_eq!(one.summary.p_at_1, 1.0);
}

#[test]
fn missing_scene_is_counted_or_fatal() {
    let scenes = synth::generate_batch(0, 3, Redundancy::Any3Of4).unwrap();
    let backends = OracleWorld::new(&scenes[..2], Corruption::None).backends();
    let records: Vec<_> = scenes.iter().map(|s| s.detection_record()).collect();
    let engine = Engine::default();
    let lenient = run_eval(&engine, &backends, &records, EvalOptions::default()).unwrap();
    assert_eq!(lenient.summary.errors, 1);
    assert!((lenient.summary.p_at_1 - 2.0 / 3.0).abs() < 1e-15);
    assert!(run_eval(&engine, &backends, &records, EvalOptions { parallelism: 1, strict: true }).is_err());
}

#[test]
fn ensemble_match_reaches_overlapping_distractor() {
    // Candidate 6 overlaps the white person 5 at IoU ~0.502 and inherits its re-detection score.
    let mentions = Mentions { location: false, color: true, relation: false };
    let scene = synth::generate_scene_with(56922, 7, Redundancy::Minimal, mentions).unwrap();
    let config =
        EngineConfig { sigma: SigmaKind::Linear, temperature: 0.25, ensemble_weight: 0.357, ..EngineConfig::default() };
    let answer = Engine::with_config(config)
        .infer(&Query::detection(scene.image(), scene.phrase.clone()), &synth::oracle_backends(&scene))
        .unwrap();
    let ids: Vec<u32> = answer.ranked.iter().map(|r| r.candidate.id).collect();
    assert_eq!(ids, vec![2, 5, 6, 3]);
    assert_eq!(ids, synth::brute_force_answer(&scene, &answer.parsed, &config));
}

fn sigma_kind() -> impl Strategy<Value = SigmaKind> {
    prop_oneof![Just(SigmaKind::Linear), Just(SigmaKind::Squared), Just(SigmaKind::Cubic), Just(SigmaKind::Exponential)]
}

fn corruption() -> impl Strategy<Value = Corruption> {
    let kind = prop_oneof![
        Just(FieldKind::ObjectType),
        Just(FieldKind::SpatialLocation),
        Just(FieldKind::VisualPattern),
        Just(FieldKind::ObjectRelation)
    ];
    prop_oneof![
        Just(Corruption::None),
        Just(Corruption::WrongSpatialTerm),
        kind.clone().prop_map(Corruption::MissingHash),
        kind.clone().prop_map(Corruption::Verbose),
        kind.prop_map(Corruption::Uniform),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pipeline_matches_direct_formula_oracle(
        seed in 0u64..100_000,
        n in 2usize..=10,
        minimal in any::<bool>(),
        mentions in (any::<bool>(), any::<bool>(), any::<bool>()),
        sigma in sigma_kind(),
        temperature in 0.25f64..4.0,
        weight in 0.0f64..0.5,
    ) {
        let mode = if minimal { Redundancy::Minimal } else { Redundancy::Any3Of4 };
        let mentions = Mentions { location: mentions.0, color: mentions.1, relation: mentions.2 };
        let scene = synth::generate_scene_with(seed, n, mode, mentions).unwrap();
        let config = EngineConfig { sigma, temperature, ensemble_weight: weight, ..EngineConfig::default() };
        let engine = Engine::with_config(config);
        let answer = engine.infer(&Query::detection(scene.image(), scene.phrase.clone()), &synth::oracle_backends(&scene)).unwrap();
        let ids: Vec<u32> = answer.ranked.iter().map(|r| r.candidate.id).collect();
        prop_assert_eq!(ids, synth::brute_force_answer(&scene, &answer.parsed, &config));
    }

    #[test]
    fn corrupted_oracles_never_crash(seed in 0u64..10_000, n in 2usize..=10, c in corruption()) {
        let scene = synth::generate_scene(seed, n, Redundancy::Any3Of4).unwrap();
        let backends = synth::oracle_backends_with(std::slice::from_ref(&scene), c);
        let answer = Engine::default().infer(&Query::detection(scene.image(), scene.phrase.clone()), &backends).unwrap();
        prop_assert!(answer.no_answer || !answer.ranked.is_empty());
    }

    #[test]
    fn visual_and_relation_prompts_differ(t in "[a-z]{1,8}", c in "[a-z]{1,8}( [a-z]{1,8}){0,2}") {
        // Word order is the only difference, so a repeated single word collapses both.
        prop_assume!(t != c);
        let v = compose_scoring_prompt(Some(&t), &c, TextFactor::Visual).unwrap();
        let r = compose_scoring_prompt(Some(&t), &c, TextFactor::Relation).unwrap();
        prop_assert_ne!(v, r);
    }
}
