//! Referring-object selection from a free-form phrase.
//!
//! A referring phrase is turned into four hashtag-delimited LLM responses
//! (object type, spatial location, visual pattern, relation), parsed through a
//! validity filter, and each detected candidate is scored by one interpreter per
//! component. The per-candidate factors are multiplied (in log space) and the
//! candidate with the largest product is the answer.
//!
//! Model backends are abstract: [`backends`] ships HTTP clients for remote
//! services and scripted mocks, and [`synth`] builds exact oracle backends from
//! synthetic scenes so the whole pipeline can be verified offline.

pub mod backends;
pub mod config;
pub mod eval;
pub mod fusion;
pub mod grammar;
pub mod interpreters;
pub mod pipeline;
pub mod prompting;
pub mod synth;
pub mod trace;
pub mod types;

pub use backends::{BackendError, BackendSet};
pub use fusion::{fuse, select, Posterior};
pub use grammar::{parse_structured, FieldKind, ParsedSemantics, SpatialTermDict, StructuredDescription};
pub use interpreters::{FactorScores, Geometry, SigmaKind};
pub use pipeline::{Answer, Engine, EngineConfig, Query, QueryMode};
pub use types::{BBox, Candidate, ImageRef};
