//! Dataset records, precision@k and a parallel evaluation runner.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendSet;
use crate::pipeline::{Engine, PipelineError, Query};
use crate::types::{BBox, Candidate, ImageRef};

/// A predicted box counts as correct when its IoU with the ground truth exceeds this.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const REPORTED_K: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundTruth {
    Box { gt_box: BBox },
    Candidate { gt_candidate_id: u32, candidates: Vec<Candidate> },
}

/// One line of a JSONL dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub record_id: String,
    pub image: ImageRef,
    pub phrase: String,
    #[serde(flatten)]
    pub truth: GroundTruth,
}

impl EvalRecord {
    pub fn query(&self) -> Result<Query, EvalError> {
        match &self.truth {
            GroundTruth::Box { .. } => Ok(Query::detection(self.image.clone(), self.phrase.clone())),
            GroundTruth::Candidate { candidates, .. } => {
                Query::association(self.image.clone(), self.phrase.clone(), candidates.clone())
                    .map_err(|e| EvalError::Record { record_id: self.record_id.clone(), detail: e.to_string() })
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },
    #[error("record {record_id}: {detail}")]
    Record { record_id: String, detail: String },
    #[error("record {record_id}: {source}")]
    Pipeline {
        record_id: String,
        #[source]
        source: PipelineError,
    },
    #[error("dataset has no records")]
    Empty,
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EvalError {
    pub fn is_backend(&self) -> bool {
        matches!(self, EvalError::Pipeline { source, .. } if source.is_backend())
    }
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>, EvalError> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Fraction of records whose top `k` boxes include one with IoU above `threshold`.
pub fn precision_at_k(answers: &[Vec<BBox>], gt: &[BBox], k: usize, threshold: f64) -> f64 {
    assert_eq!(answers.len(), gt.len(), "one answer list per ground truth");
    if gt.is_empty() {
        return 0.0;
    }
    let hits =
        answers.iter().zip(gt).filter(|(ranked, g)| ranked.iter().take(k).any(|b| iou(b, g) > threshold)).count();
    hits as f64 / gt.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub record_id: String,
    /// IoU of the rank-1 box with the ground-truth box (detection records only).
    pub best_iou: Option<f64>,
    pub hit_at_1: bool,
    /// 1-based rank of the first correct answer.
    pub hit_rank: Option<usize>,
    pub ranked_ids: Vec<u32>,
    pub best_box: Option<BBox>,
    pub no_answer: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub association: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub p_at_1: f64,
    pub p_at_5: f64,
    pub p_at_10: f64,
    pub assoc_accuracy: Option<f64>,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub per_record: Vec<RecordOutcome>,
}

impl EvalReport {
    pub fn from_outcomes(mut per_record: Vec<RecordOutcome>) -> Self {
        per_record.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        let n = per_record.len();
        let frac = |hits: usize, of: usize| if of == 0 { 0.0 } else { hits as f64 / of as f64 };
        let p_at = |k: usize| frac(per_record.iter().filter(|o| o.hit_rank.is_some_and(|r| r <= k)).count(), n);
        let assoc: Vec<&RecordOutcome> = per_record.iter().filter(|o| o.association).collect();
        let assoc_accuracy =
            (!assoc.is_empty()).then(|| frac(assoc.iter().filter(|o| o.hit_rank == Some(1)).count(), assoc.len()));
        let summary = EvalSummary {
            n,
            p_at_1: p_at(1),
            p_at_5: p_at(5),
            p_at_10: p_at(10),
            assoc_accuracy,
            errors: per_record.iter().filter(|o| o.error.is_some()).count(),
        };
        Self { summary, per_record }
    }

    /// Writes `summary.json` and `per_record.jsonl` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let summary = serde_json::to_string_pretty(&self.summary).map_err(std::io::Error::from)?;
        std::fs::write(dir.join("summary.json"), summary + "\n")?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("per_record.jsonl"))?);
        for o in &self.per_record {
            serde_json::to_writer(&mut f, o).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn evaluate_record(
    engine: &Engine,
    backends: &BackendSet,
    record: &EvalRecord,
) -> Result<RecordOutcome, EvalError> {
    let query = record.query()?;
    let answer = engine
        .infer(&query, backends)
        .map_err(|source| EvalError::Pipeline { record_id: record.record_id.clone(), source })?;
    let hit_rank = answer
        .ranked
        .iter()
        .position(|r| match &record.truth {
            GroundTruth::Box { gt_box } => iou(&r.candidate.bbox, gt_box) > DEFAULT_IOU_THRESHOLD,
            GroundTruth::Candidate { gt_candidate_id, .. } => r.candidate.id == *gt_candidate_id,
        })
        .map(|i| i + 1);
    let best_iou = match (&record.truth, answer.best()) {
        (GroundTruth::Box { gt_box }, Some(best)) => Some(iou(&best.candidate.bbox, gt_box)),
        (GroundTruth::Box { .. }, None) => Some(0.0),
        _ => None,
    };
    Ok(RecordOutcome {
        record_id: record.record_id.clone(),
        best_iou,
        hit_at_1: hit_rank == Some(1),
        hit_rank,
        ranked_ids: answer.ranked.iter().map(|r| r.candidate.id).collect(),
        best_box: answer.best().map(|r| r.candidate.bbox),
        no_answer: answer.no_answer,
        error: None,
        association: matches!(record.truth, GroundTruth::Candidate { .. }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub parallelism: usize,
    /// Abort on the first failing record instead of counting it as a miss.
    pub strict: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { parallelism: 1, strict: false }
    }
}

pub fn run_eval(
    engine: &Engine,
    backends: &BackendSet,
    records: &[EvalRecord],
    options: EvalOptions,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let results: Vec<Result<RecordOutcome, EvalError>> =
        pool.install(|| records.par_iter().map(|r| evaluate_record(engine, backends, r)).collect());
    let mut outcomes = Vec::with_capacity(results.len());
    for (record, result) in records.iter().zip(results) {
        match result {
            Ok(o) => outcomes.push(o),
            Err(e) if options.strict => return Err(e),
            Err(e) => {
                log::warn!("{e}");
                outcomes.push(RecordOutcome {
                    record_id: record.record_id.clone(),
                    best_iou: None,
                    hit_at_1: false,
                    hit_rank: None,
                    ranked_ids: Vec::new(),
                    best_box: None,
                    no_answer: false,
                    error: Some(e.to_string()),
                    association: matches!(record.truth, GroundTruth::Candidate { .. }),
                });
            }
        }
    }
    Ok(EvalReport::from_outcomes(outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn precision_counts_strictly_above_threshold() {
        let gt = vec![b(0.0, 0.0, 0.5, 1.0)];
        // IoU exactly 0.5
        let half = vec![vec![b(0.0, 0.0, 0.25, 1.0)]];
        assert_eq!(precision_at_k(&half, &gt, 1, 0.5), 0.0);
        assert_eq!(precision_at_k(&[vec![gt[0]]], &gt, 1, 0.5), 1.0);
        assert_eq!(precision_at_k(&[vec![]], &gt, 10, 0.5), 0.0);
    }

    #[test]
    fn record_json_round_trip() {
        let line = r#"{"record_id":"r1","image":{"uri":"a.png","width_px":10,"height_px":10},"phrase":"the car","gt_box":[0.1,0.1,0.2,0.2]}"#;
        let r: EvalRecord = serde_json::from_str(line).unwrap();
        assert!(matches!(r.truth, GroundTruth::Box { .. }));
        let back: EvalRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);

        let line = r#"{"record_id":"r2","image":{"uri":"a.png","width_px":10,"height_px":10},"phrase":"the car","gt_candidate_id":3,"candidates":[{"id":3,"box":[0.1,0.1,0.2,0.2],"detector_confidence":0.9}]}"#;
        let r: EvalRecord = serde_json::from_str(line).unwrap();
        assert!(matches!(r.truth, GroundTruth::Candidate { gt_candidate_id: 3, .. }));
        assert!(r.query().is_ok());
    }

    #[test]
    fn load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "\n{\"record_id\":1}\n").unwrap();
        match load_records(&p) {
            Err(EvalError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    fn outcome(i: usize, rank: Option<usize>) -> RecordOutcome {
        RecordOutcome {
            record_id: format!("r{i:03}"),
            best_iou: None,
            hit_at_1: rank == Some(1),
            hit_rank: rank,
            ranked_ids: vec![],
            best_box: None,
            no_answer: rank.is_none(),
            error: None,
            association: false,
        }
    }

    proptest::proptest! {
        #[test]
        fn metrics_monotone_and_order_independent(
            ranks in proptest::collection::vec(proptest::option::of(1usize..15), 1..40),
            seed in proptest::prelude::any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let outcomes: Vec<RecordOutcome> = ranks.iter().enumerate().map(|(i, r)| outcome(i, *r)).collect();
            let a = EvalReport::from_outcomes(outcomes.clone());
            let mut shuffled = outcomes;
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = EvalReport::from_outcomes(shuffled);
            proptest::prop_assert_eq!(&a, &b);
            proptest::prop_assert!(a.summary.p_at_1 <= a.summary.p_at_5 && a.summary.p_at_5 <= a.summary.p_at_10);
        }

        #[test]
        fn iou_is_symmetric(
            a in (0.0f64..0.5, 0.0f64..0.5, 0.5f64..1.0, 0.5f64..1.0),
            b in (0.0f64..0.5, 0.0f64..0.5, 0.5f64..1.0, 0.5f64..1.0),
        ) {
            let a = BBox::new(a.0, a.1, a.2, a.3).unwrap();
            let b = BBox::new(b.0, b.1, b.2, b.3).unwrap();
            proptest::prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            proptest::prop_assert_eq!(iou(&a, &a), 1.0);
            let v = iou(&a, &b);
            proptest::prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let set = crate::backends::MockScript::default().backends();
        assert!(matches!(run_eval(&Engine::default(), &set, &[], EvalOptions::default()), Err(EvalError::Empty)));
    }

    #[test]
    fn precision_examples() {
        let gt = vec![b(0.0, 0.0, 0.5, 0.5); 3];
        let miss = b(0.6, 0.6, 0.9, 0.9);
        let at_four = vec![vec![miss, miss, miss, gt[0]]; 3];
        assert_eq!(precision_at_k(&at_four, &gt, 1, 0.5), 0.0);
        assert_eq!(precision_at_k(&at_four, &gt, 5, 0.5), 1.0);
        let perfect = vec![vec![gt[0]]; 3];
        for k in REPORTED_K {
            assert_eq!(precision_at_k(&perfect, &gt, k, 0.5), 1.0);
        }
        assert_eq!(iou(&gt[0], &b(0.25, 0.0, 0.75, 0.5)), 1.0 / 3.0);
    }

    #[test]
    fn summary_from_outcomes() {
        let o = |id: &str, rank: Option<usize>, assoc: bool| RecordOutcome {
            record_id: id.into(),
            best_iou: None,
            hit_at_1: rank == Some(1),
            hit_rank: rank,
            ranked_ids: vec![],
            best_box: None,
            no_answer: false,
            error: None,
            association: assoc,
        };
        let r = EvalReport::from_outcomes(vec![
            o("b", Some(1), true),
            o("a", Some(3), false),
            o("c", None, true),
            o("d", Some(7), false),
        ]);
        assert_eq!(r.per_record[0].record_id, "a");
        assert_eq!(r.summary.p_at_1, 0.25);
        assert_eq!(r.summary.p_at_5, 0.5);
        assert_eq!(r.summary.p_at_10, 0.75);
        assert_eq!(r.summary.assoc_accuracy, Some(0.5));
    }
}
