//! The evaluation harness: ranked link prediction against fixed
//! negative pools, and threshold-free fraud classification metrics.
//!
//! Link queries rank each held-out edge's true endpoint inside a
//! 101-candidate pool (the positive plus `negatives` sampled
//! non-neighbors), with embeddings computed over the training graph
//! only. Fraud evaluation scores held-out labeled nodes with the
//! sigmoid head over full-graph embeddings. Both paths are pure
//! functions of (parameters, dataset, seed).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::metrics::{
    hits_at_k, max_f1, mrr, pr_auc, rank_of_positive, EvalReport, MetricError, RankingQuery,
};
use crate::model::{bridge_forward, BridgeParams, ModelError};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};
use crate::train::{sample_negatives, score_link, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("evaluation protocol: {reason}")]
    InvalidProtocol { reason: String },
    #[error("nothing to evaluate: no {what} in this split")]
    NoData { what: &'static str },
}

/// Which held-out portion a report covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    Test,
}

/// Ranking-protocol knobs: pool size and which Hits cutoffs to report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub negatives: usize,
    pub hits_ks: Vec<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            negatives: 100,
            hits_ks: vec![1, 3, 5, 10],
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.negatives == 0 {
            return Err(EvalError::InvalidProtocol {
                reason: "negatives must be at least 1".into(),
            });
        }
        if self.hits_ks.is_empty() {
            return Err(EvalError::InvalidProtocol {
                reason: "hits_ks must name at least one cutoff".into(),
            });
        }
        for &k in &self.hits_ks {
            if ![1, 3, 5, 10].contains(&k) {
                return Err(EvalError::InvalidProtocol {
                    reason: format!("hits_ks cutoff {k} is not one of 1, 3, 5, 10"),
                });
            }
        }
        Ok(())
    }
}

/// Embeds every node with the parameters held constant (no gradients).
pub fn node_embeddings(
    params: &BridgeParams,
    dataset: &Dataset,
) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let ids = params.bind_frozen(&mut tape);
    let h = bridge_forward(&mut tape, &ids, &params.config, dataset)?;
    Ok(tape.value(h).clone())
}

fn blank_report(query_count: usize, seed: u64, config_digest: &str) -> EvalReport {
    EvalReport {
        mrr: None,
        hits_at_1: None,
        hits_at_3: None,
        hits_at_5: None,
        hits_at_10: None,
        max_f1: None,
        pr_auc: None,
        query_count,
        seed,
        config_digest: config_digest.to_string(),
    }
}

/// Ranks every held-out edge against `protocol.negatives` sampled
/// non-neighbors and reports MRR plus the requested Hits cutoffs.
///
/// The split, the message-passing graph, and the negative pools all
/// derive from `seed`; negatives for an edge `(u, v)` exclude `u`, `v`,
/// and every training neighbor of `u`.
pub fn evaluate_link(
    params: &BridgeParams,
    dataset: &Dataset,
    seed: u64,
    split: EvalSplit,
    protocol: &EvalProtocol,
    config_digest: &str,
) -> Result<EvalReport, EvalError> {
    protocol.validate()?;
    let edge_split = dataset.edge_split(seed);
    let edges = match split {
        EvalSplit::Validation => &edge_split.valid,
        EvalSplit::Test => &edge_split.test,
    };
    if edges.is_empty() {
        return Err(EvalError::NoData { what: "edges" });
    }
    let train_graph = edge_split.train_graph(dataset.num_nodes())?;
    let mp_dataset = Dataset {
        graph: train_graph.clone(),
        sequences: dataset.sequences.clone(),
        node_labels: dataset.node_labels.clone(),
        vocab: dataset.vocab.clone(),
    };
    let h = node_embeddings(params, &mp_dataset)?;

    let mut rng = substream(seed, "eval-negatives");
    let mut ranks = Vec::with_capacity(edges.len());
    for &(u, v) in edges {
        let candidates =
            sample_negatives(&train_graph, u, protocol.negatives, &mut rng, &[v])?;
        let positive = score_link(h.row(u as usize), h.row(v as usize))?;
        let negatives: Vec<f64> = candidates
            .iter()
            .map(|&w| score_link(h.row(u as usize), h.row(w as usize)))
            .collect::<Result<_, _>>()?;
        let query = RankingQuery {
            positive,
            negatives,
        };
        ranks.push(rank_of_positive(&query)?);
    }

    let mut report = blank_report(edges.len(), seed, config_digest);
    report.mrr = Some(mrr(&ranks)?);
    for &k in &protocol.hits_ks {
        let value = Some(hits_at_k(&ranks, k)?);
        match k {
            1 => report.hits_at_1 = value,
            3 => report.hits_at_3 = value,
            5 => report.hits_at_5 = value,
            10 => report.hits_at_10 = value,
            _ => unreachable!("validated cutoff"),
        }
    }
    Ok(report)
}

/// Scores held-out labeled nodes with the sigmoid head and reports
/// best-threshold F1 and precision-recall area.
pub fn evaluate_fraud(
    params: &BridgeParams,
    dataset: &Dataset,
    seed: u64,
    split: EvalSplit,
    config_digest: &str,
) -> Result<EvalReport, EvalError> {
    let labels = dataset
        .node_labels
        .as_ref()
        .ok_or(EvalError::NoData { what: "node labels" })?;
    let node_split = dataset.node_split(seed);
    let nodes = match split {
        EvalSplit::Validation => &node_split.valid,
        EvalSplit::Test => &node_split.test,
    };
    if nodes.is_empty() {
        return Err(EvalError::NoData { what: "labeled nodes" });
    }
    let h = node_embeddings(params, dataset)?;
    let weight = &params.head.weight;
    let bias = params.head.bias.data()[0];

    let mut scores = Vec::with_capacity(nodes.len());
    let mut truth = Vec::with_capacity(nodes.len());
    for &n in nodes {
        let logit = score_link(h.row(n as usize), weight.data())? + bias;
        scores.push(1.0 / (1.0 + (-logit).exp()));
        truth.push(labels[n as usize].expect("split only contains labeled nodes") == 1);
    }

    let mut report = blank_report(nodes.len(), seed, config_digest);
    report.max_f1 = Some(max_f1(&scores, &truth)?);
    report.pr_auc = Some(pr_auc(&scores, &truth)?);
    Ok(report)
}
