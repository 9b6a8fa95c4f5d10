//! Log-space product of factor probabilities and the ranked selection.
//!
//! Every factor is clamped below at `epsilon` so a single near-zero factor
//! cannot veto a candidate outright. Ties on the fused score are broken by the
//! type factor (higher first), then by candidate id (lower first).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::interpreters::FactorScores;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub candidate_id: u32,
    /// Sum of log factors; the posterior up to a constant.
    pub log_score: f64,
    /// 1-based rank.
    pub rank: usize,
}

pub fn log_score(f: &FactorScores, epsilon: f64) -> f64 {
    f.values().iter().map(|v| v.clamp(epsilon, 1.0).ln()).sum()
}

/// Fuses with the default epsilon. Output is in rank order.
pub fn fuse(factors: &[FactorScores]) -> Vec<Posterior> {
    fuse_with_epsilon(factors, DEFAULT_EPSILON)
}

pub fn fuse_with_epsilon(factors: &[FactorScores], epsilon: f64) -> Vec<Posterior> {
    let mut scored: Vec<(&FactorScores, f64)> = factors.iter().map(|f| (f, log_score(f, epsilon))).collect();
    scored.sort_by(|(fa, a), (fb, b)| {
        b.total_cmp(a).then_with(|| fb.p_type.total_cmp(&fa.p_type)).then_with(|| fa.candidate_id.cmp(&fb.candidate_id))
    });
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (f, s))| Posterior { candidate_id: f.candidate_id, log_score: s, rank: i + 1 })
        .collect()
}

/// First `k` candidate ids by rank. `select(p, 1)` is the argmax.
pub fn select(posteriors: &[Posterior], k: usize) -> Vec<u32> {
    let mut by_rank: Vec<&Posterior> = posteriors.iter().collect();
    by_rank.sort_by(|a, b| a.rank.cmp(&b.rank).then(Ordering::Equal));
    by_rank.into_iter().take(k).map(|p| p.candidate_id).collect()
}
