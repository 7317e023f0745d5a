//! Full-item-set ranking metrics with deterministic, pessimistic ties.
//!
//! The rank of the held-out target counts every item scoring strictly
//! higher plus every equal-scoring item with a smaller identifier, over
//! the whole item set (unscored items sit at zero). MRR@k and NDCG@k use
//! the single-relevant-item forms, so the ideal DCG is one.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::knn::ScoreMap;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("cannot compute metrics over an empty rank list")]
    EmptyRanks,
    #[error("cutoff list must be non-empty with every cutoff >= 1")]
    BadCutoffs,
}

/// Aggregated metrics per cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mrr_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

/// Deterministic full-item-set rank of `target` (1-based).
///
/// `rank = 1 + |{score > target's}| + |{score == target's, id < target}|`,
/// with unscored items at score zero. A zero-scored target therefore ranks
/// behind every positively scored item.
pub fn rank_of_target(scores: &ScoreMap, target: u32, item_count: usize) -> usize {
    debug_assert!((target as usize) < item_count);
    let target_score = scores.get(target);
    let mut greater = 0usize;
    let mut equal_smaller = 0usize;
    let mut stored_below_target = 0usize;
    let mut stored_total = 0usize;
    for (item, score) in scores.iter() {
        stored_total += 1;
        if item < target {
            stored_below_target += 1;
        }
        if item == target {
            continue;
        }
        if score > target_score {
            greater += 1;
        } else if score == target_score && item < target {
            equal_smaller += 1;
        }
    }
    // Items absent from the map score exactly zero.
    if target_score == 0.0 {
        equal_smaller += target as usize - stored_below_target;
    } else if target_score < 0.0 {
        // Every unscored item beats a negative score; the target itself is
        // necessarily stored here.
        greater += item_count - stored_total;
    }
    1 + greater + equal_smaller
}

/// MRR@c and NDCG@c over per-query ranks.
pub fn metrics(ranks: &[usize], cutoffs: &[usize]) -> Result<EvalReport, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyRanks);
    }
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(EvalError::BadCutoffs);
    }
    debug_assert!(ranks.iter().all(|&r| r >= 1));
    let n = ranks.len() as f64;
    let mut mrr_at = BTreeMap::new();
    let mut ndcg_at = BTreeMap::new();
    for &c in cutoffs {
        let mut mrr = 0.0;
        let mut ndcg = 0.0;
        for &r in ranks {
            if r <= c {
                mrr += 1.0 / r as f64;
                ndcg += 1.0 / ((r + 1) as f64).log2();
            }
        }
        mrr_at.insert(c, mrr / n);
        ndcg_at.insert(c, ndcg / n);
    }
    Ok(EvalReport { mrr_at, ndcg_at, n_queries: ranks.len() })
}

impl EvalReport {
    /// Machine-readable key-value lines, deterministic byte-for-byte.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("n_queries\t{}\n", self.n_queries));
        for (c, v) in &self.mrr_at {
            out.push_str(&format!("mrr@{c}\t{v:.10}\n"));
        }
        for (c, v) in &self.ndcg_at {
            out.push_str(&format!("ndcg@{c}\t{v:.10}\n"));
        }
        out
    }

    /// Human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("metric");
        for c in self.mrr_at.keys() {
            out.push_str(&format!("\t@{c}"));
        }
        out.push('\n');
        out.push_str("MRR");
        for v in self.mrr_at.values() {
            out.push_str(&format!("\t{v:.6}"));
        }
        out.push('\n');
        out.push_str("NDCG");
        for v in self.ndcg_at.values() {
            out.push_str(&format!("\t{v:.6}"));
        }
        out.push('\n');
        out.push_str(&format!("queries\t{}\n", self.n_queries));
        out
    }
}
