//! Per-query record of every backend call.

use serde::{Deserialize, Serialize};

use crate::grammar::FieldKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "snake_case")]
pub enum TraceEntry {
    Llm {
        field: FieldKind,
        prompt: String,
        response: String,
    },
    Detect {
        prompt: String,
        returned: usize,
    },
    Score {
        prompt: String,
        candidate_id: u32,
        raw: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        error: Option<String>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub system_prompt: String,
    pub calls: Vec<TraceEntry>,
}

impl Trace {
    pub fn push(&mut self, entry: TraceEntry) {
        self.calls.push(entry);
    }

    pub fn llm_calls(&self) -> usize {
        self.calls.iter().filter(|c| matches!(c, TraceEntry::Llm { .. })).count()
    }
}
