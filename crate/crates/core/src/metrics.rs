//! Ranking metrics (MRR, Hits@k) and classification metrics (Max F1,
//! PR-AUC) with exact small-case semantics.
//!
//! Two conventions are fixed here and relied on everywhere: ranking ties
//! count *against* the positive (pessimistic), and PR-AUC is average
//! precision with step interpolation, processing tied scores as a single
//! group. Both make small cases exactly reproducible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: {role} score at index {index} is not finite")]
    NonFiniteScore {
        op: &'static str,
        role: &'static str,
        index: usize,
    },
    #[error("rank {rank} is invalid; ranks start at 1")]
    InvalidRank { rank: usize },
    #[error("hits_at_k: k must be at least 1")]
    InvalidK,
    #[error("{op}: {scores} scores but {labels} labels")]
    LengthMismatch {
        op: &'static str,
        scores: usize,
        labels: usize,
    },
    #[error("{op}: no positive label; recall is undefined")]
    NoPositiveLabel { op: &'static str },
}

/// One link-prediction query: the true edge's score against sampled
/// non-edges.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingQuery {
    pub positive: f64,
    pub negatives: Vec<f64>,
}

/// Pessimistic rank of the positive: `1 + #{negatives > positive} +
/// #{negatives == positive}` — a tie never flatters the model.
pub fn rank_of_positive(query: &RankingQuery) -> Result<usize, MetricError> {
    const OP: &str = "rank_of_positive";
    if query.negatives.is_empty() {
        return Err(MetricError::EmptyInput { op: OP });
    }
    if !query.positive.is_finite() {
        return Err(MetricError::NonFiniteScore {
            op: OP,
            role: "positive",
            index: 0,
        });
    }
    if let Some(index) = query.negatives.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore {
            op: OP,
            role: "negative",
            index,
        });
    }
    let beaten_or_tied = query
        .negatives
        .iter()
        .filter(|&&neg| neg >= query.positive)
        .count();
    Ok(1 + beaten_or_tied)
}

/// Mean reciprocal rank.
pub fn mrr(ranks: &[usize]) -> Result<f64, MetricError> {
    if ranks.is_empty() {
        return Err(MetricError::EmptyInput { op: "mrr" });
    }
    if ranks.contains(&0) {
        return Err(MetricError::InvalidRank { rank: 0 });
    }
    let total: f64 = ranks.iter().map(|&r| 1.0 / r as f64).sum();
    Ok(total / ranks.len() as f64)
}

/// Fraction of ranks within the top `k`.
pub fn hits_at_k(ranks: &[usize], k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    if ranks.is_empty() {
        return Err(MetricError::EmptyInput { op: "hits_at_k" });
    }
    if ranks.contains(&0) {
        return Err(MetricError::InvalidRank { rank: 0 });
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Indices sorted by descending score, after validating the inputs.
fn descending_order(
    op: &'static str,
    scores: &[f64],
    labels: &[bool],
) -> Result<Vec<usize>, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            op,
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricError::EmptyInput { op });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore {
            op,
            role: "score",
            index,
        });
    }
    if !labels.contains(&true) {
        return Err(MetricError::NoPositiveLabel { op });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite"));
    Ok(order)
}

/// Walks cutoffs placed after each *group* of tied scores, handing the
/// cumulative true/false positive counts to `visit`.
fn sweep_tie_groups(
    scores: &[f64],
    labels: &[bool],
    order: &[usize],
    mut visit: impl FnMut(usize, usize),
) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut at = 0usize;
    while at < order.len() {
        let group_score = scores[order[at]];
        while at < order.len() && scores[order[at]] == group_score {
            if labels[order[at]] {
                tp += 1;
            } else {
                fp += 1;
            }
            at += 1;
        }
        visit(tp, fp);
    }
}

/// Best F1 over every threshold between consecutive distinct scores plus
/// the two extremes. Predicting nothing has F1 = 0 by definition, so the
/// running maximum starts there.
pub fn max_f1(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let order = descending_order("max_f1", scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    let mut best = 0.0f64;
    sweep_tie_groups(scores, labels, &order, |tp, fp| {
        let fn_count = positives - tp;
        // From counts, not from P and R, so small cases are exact.
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_count) as f64;
        best = best.max(f1);
    });
    Ok(best)
}

/// Average precision: `Σ (R_n − R_{n−1}) · P_n` down the descending-score
/// sweep, tied scores as one step.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let order = descending_order("pr_auc", scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    let mut area = 0.0f64;
    let mut prev_recall = 0.0f64;
    sweep_tie_groups(scores, labels, &order, |tp, fp| {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    });
    Ok(area)
}

/// The flat record a finished evaluation writes: ranking metrics for the
/// link task, classification metrics for the fraud task, and enough
/// metadata to reproduce the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mrr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hits_at_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hits_at_3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hits_at_5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hits_at_10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pr_auc: Option<f64>,
    pub query_count: usize,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    /// Deterministic single-line JSON: field order is fixed by the struct.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
