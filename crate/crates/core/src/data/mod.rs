//! Dataset containers: a graph, one event sequence per node, an optional
//! binary label per node, and the vocabulary the sequences are indexed
//! against. Also houses seeded train/valid/test splitting.
//!
//! Sub-modules cover the three ways datasets come into existence:
//! [`ingest`] (line-delimited files), [`derive`] (building graphs and
//! labels from raw review/location data), and [`synthetic`] (a seeded
//! community-structured generator).

pub mod derive;
pub mod ingest;
pub mod synthetic;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::graph::{Graph, GraphError};
use crate::rng::substream;

/// Reserved vocabulary id for padding rows.
pub const PAD_ID: u32 = 0;
/// Reserved vocabulary id for out-of-vocabulary tokens.
pub const UNK_ID: u32 = 1;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Default cap on sequence length; ingestion keeps the most recent events.
pub const DEFAULT_MAX_SEQ_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {message}")]
    MalformedRecord {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: node ids are not dense 0..{expected}: {message}")]
    NonDenseIds {
        path: String,
        expected: usize,
        message: String,
    },
    #[error("geohash {value:?} rejected: {reason}")]
    InvalidGeohash { value: String, reason: &'static str },
    #[error("co-occurrence threshold must be at least 1")]
    InvalidThreshold,
    #[error("fraud labeling rule invalid: {reason}")]
    InvalidLabelRule { reason: &'static str },
    #[error("synthetic spec invalid: {reason}")]
    InvalidSyntheticSpec { reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Bidirectional token-string/id map with two reserved entries: id 0 pads,
/// id 1 marks unknown tokens. Interned ids are dense and never reassigned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        vocab.intern(PAD_TOKEN);
        vocab.intern(UNK_TOKEN);
        vocab
    }

    /// Returns the token's id, assigning the next free id on first sight.
    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }
}

/// One node's ordered event-token ids. Construction pads an empty list to
/// a single `PAD_ID` so every node has at least one row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventSequence {
    token_ids: Vec<u32>,
}

impl EventSequence {
    pub fn new(mut token_ids: Vec<u32>) -> Self {
        if token_ids.is_empty() {
            token_ids.push(PAD_ID);
        }
        EventSequence { token_ids }
    }

    /// A sequence holding a single padding token; stands in for "no
    /// events" and for sequence-blind baselines.
    pub fn pad_only() -> Self {
        EventSequence::new(Vec::new())
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    /// Length after padding policy; always at least 1.
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // padded at construction
    }

    /// Keeps only the `cap` most recent events (the tail).
    pub fn truncate_keep_recent(&mut self, cap: usize) {
        let cap = cap.max(1);
        if self.token_ids.len() > cap {
            self.token_ids.drain(..self.token_ids.len() - cap);
        }
    }

    /// Which rows carry real content, as opposed to padding that attention
    /// must ignore. A sequence that is *entirely* padding represents "no
    /// events" and is deliberately left unmasked: masking every key would
    /// leave attention without a distribution, and sequence-blind baselines
    /// run exactly this case.
    pub fn content_mask(&self) -> Vec<bool> {
        let mask: Vec<bool> = self.token_ids.iter().map(|&id| id != PAD_ID).collect();
        if mask.iter().any(|&m| m) {
            mask
        } else {
            vec![true; self.token_ids.len()]
        }
    }

    /// Indices of content rows (see [`EventSequence::content_mask`]).
    pub fn content_rows(&self) -> Vec<usize> {
        self.content_mask()
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// A complete learning problem: graph, per-node sequences, optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graph: Graph,
    pub sequences: Vec<EventSequence>,
    /// `Some` when at least one node is labeled; inner `None` marks
    /// unlabeled nodes.
    pub node_labels: Option<Vec<Option<u8>>>,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    /// Checks the cross-field invariants that constructors promise.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.sequences.len() != self.graph.num_nodes() {
            return Err(DataError::InvalidSyntheticSpec {
                reason: format!(
                    "{} sequences for {} nodes",
                    self.sequences.len(),
                    self.graph.num_nodes()
                ),
            });
        }
        for (node, seq) in self.sequences.iter().enumerate() {
            for &id in seq.token_ids() {
                if id as usize >= self.vocab.len() {
                    return Err(DataError::InvalidSyntheticSpec {
                        reason: format!("node {node} holds token id {id} outside the vocabulary"),
                    });
                }
            }
        }
        if let Some(labels) = &self.node_labels {
            if labels.len() != self.graph.num_nodes() {
                return Err(DataError::InvalidSyntheticSpec {
                    reason: format!(
                        "{} labels for {} nodes",
                        labels.len(),
                        self.graph.num_nodes()
                    ),
                });
            }
        }
        Ok(())
    }

    /// A copy whose sequences are all a single padding token. Models see
    /// graph structure only; used as the sequence-blind baseline.
    pub fn pad_only_copy(&self) -> Dataset {
        Dataset {
            graph: self.graph.clone(),
            sequences: vec![EventSequence::pad_only(); self.sequences.len()],
            node_labels: self.node_labels.clone(),
            vocab: self.vocab.clone(),
        }
    }

    /// Splits edges 80/10/10 by seeded shuffle. The three sets are
    /// disjoint and cover the edge set; the remainder after the two 10%
    /// cuts goes to train.
    pub fn edge_split(&self, seed: u64) -> EdgeSplit {
        let mut edges: Vec<(u32, u32)> = self.graph.edges().to_vec();
        let mut rng = substream(seed, "edge-split");
        edges.shuffle(&mut rng);
        let n = edges.len();
        let n_valid = n / 10;
        let n_test = n / 10;
        let test = sorted(edges.split_off(n - n_test));
        let valid = sorted(edges.split_off(n - n_test - n_valid));
        let train = sorted(edges);
        EdgeSplit { train, valid, test }
    }

    /// Splits the *labeled* nodes 80/10/10 by seeded shuffle.
    pub fn node_split(&self, seed: u64) -> NodeSplit {
        let mut nodes: Vec<u32> = match &self.node_labels {
            Some(labels) => labels
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.map(|_| i as u32))
                .collect(),
            None => Vec::new(),
        };
        let mut rng = substream(seed, "node-split");
        nodes.shuffle(&mut rng);
        let n = nodes.len();
        let n_valid = n / 10;
        let n_test = n / 10;
        let mut test = nodes.split_off(n - n_test);
        let mut valid = nodes.split_off(n - n_test - n_valid);
        test.sort_unstable();
        valid.sort_unstable();
        nodes.sort_unstable();
        NodeSplit {
            train: nodes,
            valid,
            test,
        }
    }
}

fn sorted(mut edges: Vec<(u32, u32)>) -> Vec<(u32, u32)> {
    edges.sort_unstable();
    edges
}

/// Disjoint edge partition for link prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSplit {
    pub train: Vec<(u32, u32)>,
    pub valid: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
}

impl EdgeSplit {
    /// The graph visible during training and negative sampling: train
    /// edges only.
    pub fn train_graph(&self, num_nodes: usize) -> Result<Graph, GraphError> {
        Graph::new(num_nodes, self.train.iter().copied())
    }
}

/// Disjoint labeled-node partition for node classification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSplit {
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset(num_edges_nodes: usize) -> Dataset {
        let n = num_edges_nodes;
        let edges: Vec<(u32, u32)> = (0..n as u32 - 1).map(|i| (i, i + 1)).collect();
        let graph = Graph::new(n, edges).unwrap();
        let mut vocab = Vocab::new();
        let t = vocab.intern("tok");
        Dataset {
            graph,
            sequences: (0..n).map(|_| EventSequence::new(vec![t])).collect(),
            node_labels: Some((0..n).map(|i| Some((i % 2) as u8)).collect()),
            vocab,
        }
    }

    #[test]
    fn vocab_reserves_pad_and_unk() {
        let mut v = Vocab::new();
        assert_eq!(v.lookup(PAD_TOKEN), Some(PAD_ID));
        assert_eq!(v.lookup(UNK_TOKEN), Some(UNK_ID));
        let id = v.intern("abc");
        assert_eq!(id, 2);
        assert_eq!(v.intern("abc"), 2, "re-interning must not reassign");
        assert_eq!(v.intern(PAD_TOKEN), PAD_ID);
        assert_eq!(v.token(2), Some("abc"));
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn empty_sequence_pads_to_length_one() {
        let s = EventSequence::new(vec![]);
        assert_eq!(s.token_ids(), &[PAD_ID]);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let mut s = EventSequence::new(vec![1, 2, 3, 4, 5]);
        s.truncate_keep_recent(3);
        assert_eq!(s.token_ids(), &[3, 4, 5]);
    }

    #[test]
    fn content_mask_hides_pad_rows_in_mixed_sequences() {
        let s = EventSequence::new(vec![5, PAD_ID, 7]);
        assert_eq!(s.content_mask(), vec![true, false, true]);
        assert_eq!(s.content_rows(), vec![0, 2]);
    }

    #[test]
    fn all_pad_sequence_counts_as_content() {
        let s = EventSequence::pad_only();
        assert_eq!(s.content_mask(), vec![true]);
        assert_eq!(s.content_rows(), vec![0]);
    }

    #[test]
    fn edge_split_is_disjoint_and_covers() {
        let ds = small_dataset(101);
        let split = ds.edge_split(9);
        let mut all: Vec<(u32, u32)> = split
            .train
            .iter()
            .chain(&split.valid)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, ds.graph.edges());
        assert_eq!(split.valid.len(), 10);
        assert_eq!(split.test.len(), 10);
        assert_eq!(split.train.len(), 80);
    }

    #[test]
    fn edge_split_is_seed_deterministic() {
        let ds = small_dataset(50);
        assert_eq!(ds.edge_split(3), ds.edge_split(3));
        assert_ne!(ds.edge_split(3), ds.edge_split(4));
    }

    #[test]
    fn node_split_partitions_labeled_nodes() {
        let mut ds = small_dataset(30);
        // Unlabel a third of the nodes; they must not appear in any part.
        if let Some(labels) = ds.node_labels.as_mut() {
            for i in (0..30).step_by(3) {
                labels[i] = None;
            }
        }
        let split = ds.node_split(5);
        let total = split.train.len() + split.valid.len() + split.test.len();
        assert_eq!(total, 20);
        for part in [&split.train, &split.valid, &split.test] {
            for &n in part {
                assert!(n % 3 != 0, "unlabeled node {n} leaked into the split");
            }
        }
    }

    #[test]
    fn pad_only_copy_blinds_sequences_only() {
        let ds = small_dataset(6);
        let blind = ds.pad_only_copy();
        assert_eq!(blind.graph, ds.graph);
        assert_eq!(blind.node_labels, ds.node_labels);
        assert!(blind
            .sequences
            .iter()
            .all(|s| s.token_ids() == [PAD_ID]));
    }

    #[test]
    fn validate_catches_sequence_count_mismatch() {
        let mut ds = small_dataset(5);
        ds.sequences.pop();
        assert!(ds.validate().is_err());
    }
}
