//! C ABI over `flora-core`.
//!
//! Conventions: every fallible function returns a [`FloraStatus`] and writes
//! results through out-pointers. Strings handed out are NUL-terminated UTF-8
//! owned by the caller and released with [`flora_string_free`]. After a non-OK
//! status, [`flora_last_error_message`] describes the failure on that thread.
//! Handles are opaque and freed with their `_free` function; passing NULL to a
//! `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use flora::config::RunConfig;
use flora::grammar::{FlmParser, DEFAULT_WORD_CAP};
use flora::interpreters::{location_relevance, sigma, Geometry};
use flora::prompting::{build_instance_prompt, build_system_prompt};
use flora::{
    BBox, BackendSet, Candidate, Engine, FactorScores, FieldKind, ImageRef, Query, SigmaKind, SpatialTermDict,
    StructuredDescription,
};
use serde::Deserialize;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloraStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Backend = 4,
    Io = 5,
    NoAnswer = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloraSigma {
    Linear = 0,
    Squared = 1,
    Cubic = 2,
    Exponential = 3,
}

impl From<FloraSigma> for SigmaKind {
    fn from(s: FloraSigma) -> Self {
        match s {
            FloraSigma::Linear => SigmaKind::Linear,
            FloraSigma::Squared => SigmaKind::Squared,
            FloraSigma::Cubic => SigmaKind::Cubic,
            FloraSigma::Exponential => SigmaKind::Exponential,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloraField {
    Type = 0,
    Location = 1,
    Visual = 2,
    Relation = 3,
}

impl From<FloraField> for FieldKind {
    fn from(f: FloraField) -> Self {
        match f {
            FloraField::Type => FieldKind::ObjectType,
            FloraField::Location => FieldKind::SpatialLocation,
            FloraField::Visual => FieldKind::VisualPattern,
            FloraField::Relation => FieldKind::ObjectRelation,
        }
    }
}

/// Factor values for one candidate. Pass 1.0 for a factor that does not apply.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloraFactors {
    pub candidate_id: u32,
    pub p_type: f64,
    pub p_location: f64,
    pub p_visual: f64,
    pub p_relation: f64,
}

/// Spatial term dictionary.
pub struct FloraDict {
    inner: SpatialTermDict,
}

/// Engine plus the backends named by its config.
pub struct FloraEngine {
    engine: Engine,
    backends: BackendSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(FloraStatus, String);

impl Fail {
    fn arg(msg: impl std::fmt::Display) -> Self {
        Fail(FloraStatus::InvalidArgument, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FloraStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FloraStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside flora");
            FloraStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(FloraStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(FloraStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn optional_text<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(FloraStatus::NullPointer, format!("{what} is NULL")));
    }
    out.write(value);
    Ok(())
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("NULs replaced").into_raw()
}

unsafe fn read_box(p: *const f64, what: &str) -> Result<BBox, Fail> {
    if p.is_null() {
        return Err(Fail(FloraStatus::NullPointer, format!("{what} is NULL")));
    }
    let v = std::slice::from_raw_parts(p, 4);
    BBox::new(v[0], v[1], v[2], v[3]).map_err(Fail::arg)
}

/// Message for the last non-OK status on this thread, or NULL. Valid until the
/// next flora call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn flora_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn flora_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// The built-in dictionary of canonical spatial terms and synonyms.
#[no_mangle]
pub extern "C" fn flora_dict_default() -> *mut FloraDict {
    Box::into_raw(Box::new(FloraDict { inner: SpatialTermDict::default() }))
}

/// # Safety
/// `path` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flora_dict_load(path: *const c_char, out: *mut *mut FloraDict) -> FloraStatus {
    guard(|| {
        let path = text(path, "path")?;
        let inner = SpatialTermDict::load(Path::new(path)).map_err(|e| Fail(FloraStatus::Io, e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(FloraDict { inner })), "out")
    })
}

/// # Safety
/// `dict` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn flora_dict_free(dict: *mut FloraDict) {
    if !dict.is_null() {
        drop(Box::from_raw(dict));
    }
}

unsafe fn dict_or_default(dict: *const FloraDict, fallback: &SpatialTermDict) -> &SpatialTermDict {
    if dict.is_null() {
        fallback
    } else {
        &(*dict).inner
    }
}

/// Parses four raw LLM responses into JSON
/// `{"type", "location", "visual", "relation"}` with null for absent fields.
/// `dict` may be NULL for the built-in dictionary; `word_cap` 0 means the default.
///
/// # Safety
/// String arguments must be valid C strings, `dict` NULL or live, `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn flora_parse(
    dict: *const FloraDict,
    type_response: *const c_char,
    location_response: *const c_char,
    visual_response: *const c_char,
    relation_response: *const c_char,
    word_cap: usize,
    out_json: *mut *mut c_char,
) -> FloraStatus {
    guard(|| {
        let s = StructuredDescription::new(
            text(type_response, "type_response")?,
            text(location_response, "location_response")?,
            text(visual_response, "visual_response")?,
            text(relation_response, "relation_response")?,
        );
        let fallback = SpatialTermDict::default();
        let dict = dict_or_default(dict, &fallback).clone();
        let cap = if word_cap == 0 { DEFAULT_WORD_CAP } else { word_cap };
        let parsed = FlmParser::new(dict, cap).parse(&s);
        let json = serde_json::to_string(&parsed).map_err(Fail::arg)?;
        write_out(out_json, into_c_string(json), "out_json")
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flora_sigma(v: f64, kind: FloraSigma, out: *mut f64) -> FloraStatus {
    guard(|| {
        let r = sigma(v, kind.into()).map_err(Fail::arg)?;
        write_out(out, r, "out")
    })
}

/// Location relevance of `bbox` (x_min, y_min, x_max, y_max, normalized) for
/// space-separated canonical `terms`. `dict` may be NULL.
///
/// # Safety
/// `bbox` must point to four doubles, `terms` be a valid C string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flora_location_relevance(
    dict: *const FloraDict,
    terms: *const c_char,
    bbox: *const f64,
    kind: FloraSigma,
    epsilon: f64,
    out: *mut f64,
) -> FloraStatus {
    guard(|| {
        let terms: Vec<String> = text(terms, "terms")?.split_whitespace().map(str::to_string).collect();
        let b = read_box(bbox, "bbox")?;
        let fallback = SpatialTermDict::default();
        let dict = dict_or_default(dict, &fallback);
        let r = location_relevance(&terms, &Geometry::of_box(&b), kind.into(), dict, epsilon).map_err(Fail::arg)?;
        write_out(out, r, "out")
    })
}

/// # Safety
/// `a` and `b` must each point to four doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flora_iou(a: *const f64, b: *const f64, out: *mut f64) -> FloraStatus {
    guard(|| {
        let a = read_box(a, "a")?;
        let b = read_box(b, "b")?;
        write_out(out, a.iou(&b), "out")
    })
}

/// Ranks `n` candidates. Writes candidate ids best-first to `out_ids` and the
/// matching log scores to `out_log_scores` (may be NULL); both hold `n` entries.
///
/// # Safety
/// `factors` must point to `n` structs and `out_ids` to room for `n` ids.
#[no_mangle]
pub unsafe extern "C" fn flora_fuse(
    factors: *const FloraFactors,
    n: usize,
    epsilon: f64,
    out_ids: *mut u32,
    out_log_scores: *mut f64,
) -> FloraStatus {
    guard(|| {
        if n == 0 {
            return Ok(());
        }
        if factors.is_null() || out_ids.is_null() {
            return Err(Fail(FloraStatus::NullPointer, "factors or out_ids is NULL".into()));
        }
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Fail::arg("epsilon must lie in (0, 1]"));
        }
        let input = std::slice::from_raw_parts(factors, n);
        let mut table = Vec::with_capacity(n);
        for f in input {
            let vals = [f.p_type, f.p_location, f.p_visual, f.p_relation];
            if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Fail::arg(format!("factor of candidate {} outside [0, 1]", f.candidate_id)));
            }
            let mut s = FactorScores::new(f.candidate_id, f.p_type);
            s.set(FieldKind::SpatialLocation, f.p_location);
            s.set(FieldKind::VisualPattern, f.p_visual);
            s.set(FieldKind::ObjectRelation, f.p_relation);
            table.push(s);
        }
        let ranked = flora::fusion::fuse_with_epsilon(&table, epsilon);
        let ids = std::slice::from_raw_parts_mut(out_ids, n);
        for (slot, p) in ids.iter_mut().zip(&ranked) {
            *slot = p.candidate_id;
        }
        if !out_log_scores.is_null() {
            let logs = std::slice::from_raw_parts_mut(out_log_scores, n);
            for (slot, p) in logs.iter_mut().zip(&ranked) {
                *slot = p.log_score;
            }
        }
        Ok(())
    })
}

/// The fixed system prompt. Free with [`flora_string_free`].
#[no_mangle]
pub extern "C" fn flora_prompt_system() -> *mut c_char {
    into_c_string(build_system_prompt())
}

/// # Safety
/// `phrase` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flora_prompt_instance(
    field: FloraField,
    phrase: *const c_char,
    out: *mut *mut c_char,
) -> FloraStatus {
    guard(|| {
        let prompt = build_instance_prompt(field.into(), text(phrase, "phrase")?).map_err(Fail::arg)?;
        write_out(out, into_c_string(prompt), "out")
    })
}

/// Builds an engine from a config file, or from `$FLORA_CONFIG` when `config_path` is NULL.
///
/// # Safety
/// `config_path` must be NULL or a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flora_engine_new(config_path: *const c_char, out: *mut *mut FloraEngine) -> FloraStatus {
    guard(|| {
        let path = optional_text(config_path, "config_path")?;
        let cfg = RunConfig::resolve(path.map(Path::new)).map_err(Fail::arg)?;
        let engine = cfg.engine().map_err(Fail::arg)?;
        let backends = cfg.backends().map_err(Fail::arg)?;
        write_out(out, Box::into_raw(Box::new(FloraEngine { engine, backends })), "out")
    })
}

/// # Safety
/// `engine` must come from [`flora_engine_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn flora_engine_free(engine: *mut FloraEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

#[derive(Deserialize)]
struct QueryJson {
    image: ImageRef,
    phrase: String,
    #[serde(default)]
    candidates: Option<Vec<Candidate>>,
}

/// Runs one query given as JSON
/// `{"image": {"uri", "width_px", "height_px"}, "phrase", "candidates"?}` and
/// writes the ranked answer as JSON. Returns `NoAnswer`, still writing the
/// JSON, when nothing was detected.
///
/// # Safety
/// `engine` must be live, `query_json` a valid C string, `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn flora_engine_infer(
    engine: *const FloraEngine,
    query_json: *const c_char,
    out_json: *mut *mut c_char,
) -> FloraStatus {
    let mut no_answer = false;
    let status = guard(|| {
        if engine.is_null() {
            return Err(Fail(FloraStatus::NullPointer, "engine is NULL".into()));
        }
        let engine = &*engine;
        let q: QueryJson = serde_json::from_str(text(query_json, "query_json")?).map_err(Fail::arg)?;
        let query = match q.candidates {
            Some(c) => Query::association(q.image, q.phrase, c).map_err(Fail::arg)?,
            None => Query::detection(q.image, q.phrase),
        };
        let answer = engine.engine.infer(&query, &engine.backends).map_err(|e| {
            let status = if e.is_backend() { FloraStatus::Backend } else { FloraStatus::InvalidArgument };
            Fail(status, e.to_string())
        })?;
        no_answer = answer.no_answer;
        let json = serde_json::to_string(&answer).map_err(Fail::arg)?;
        write_out(out_json, into_c_string(json), "out_json")
    });
    if status == FloraStatus::Ok && no_answer {
        set_error("no candidate matched");
        return FloraStatus::NoAnswer;
    }
    status
}
