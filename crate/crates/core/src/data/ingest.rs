//! Line-delimited dataset files.
//!
//! Three files describe a dataset: `nodes.jsonl` (one record per node with
//! `id`, `seq`, optional `label`), `edges.jsonl` (`u`/`v` pairs), and an
//! optional labels file (`id`/`label`) that overrides inline labels. Node
//! ids must be dense `0..N-1`; everything else about ordering is
//! normalized on the way in. Errors carry the file path and line number
//! of the offending record.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, EventSequence, Vocab};
use crate::graph::Graph;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: u64,
    seq: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    u: u64,
    v: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    id: u64,
    label: u8,
}

fn read_to_string(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::MalformedRecord {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

// Parses every non-empty line as a `T`, keeping 1-based line numbers.
fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, DataError> {
    let text = read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: T =
            serde_json::from_str(line).map_err(|e| malformed(path, idx + 1, e.to_string()))?;
        records.push((idx + 1, record));
    }
    Ok(records)
}

/// Reads a dataset from node/edge files plus an optional labels file.
/// Sequences longer than `max_seq_len` keep their most recent tokens.
pub fn ingest_dataset(
    nodes_path: &Path,
    edges_path: &Path,
    labels_path: Option<&Path>,
    max_seq_len: usize,
) -> Result<Dataset, DataError> {
    let mut node_records = parse_lines::<NodeRecord>(nodes_path)?;
    let num_nodes = node_records.len();

    // Dense-id check before sorting, so duplicate reports carry a line.
    let mut seen = vec![false; num_nodes];
    for (line, record) in &node_records {
        let id = record.id as usize;
        if record.id >= num_nodes as u64 {
            return Err(malformed(
                nodes_path,
                *line,
                format!("node id {} outside dense range 0..{num_nodes}", record.id),
            ));
        }
        if seen[id] {
            return Err(malformed(nodes_path, *line, format!("duplicate node id {id}")));
        }
        seen[id] = true;
        if let Some(label) = record.label {
            if label > 1 {
                return Err(malformed(nodes_path, *line, format!("label must be 0 or 1, got {label}")));
            }
        }
    }
    node_records.sort_by_key(|(_, r)| r.id);

    let mut vocab = Vocab::new();
    let mut sequences = Vec::with_capacity(num_nodes);
    let mut labels: Vec<Option<u8>> = Vec::with_capacity(num_nodes);
    for (_, record) in &node_records {
        let ids: Vec<u32> = record.seq.iter().map(|t| vocab.intern(t)).collect();
        let mut seq = EventSequence::new(ids);
        seq.truncate_keep_recent(max_seq_len);
        sequences.push(seq);
        labels.push(record.label);
    }

    let mut edges = Vec::new();
    for (line, record) in parse_lines::<EdgeRecord>(edges_path)? {
        for endpoint in [record.u, record.v] {
            if endpoint >= num_nodes as u64 {
                return Err(malformed(
                    edges_path,
                    line,
                    format!("edge endpoint {endpoint} references no node (N = {num_nodes})"),
                ));
            }
        }
        if record.u == record.v {
            return Err(malformed(
                edges_path,
                line,
                format!("self-loop at node {}", record.u),
            ));
        }
        edges.push((record.u as u32, record.v as u32));
    }
    let graph = Graph::new(num_nodes, edges)?;

    if let Some(path) = labels_path {
        for (line, record) in parse_lines::<LabelRecord>(path)? {
            if record.id >= num_nodes as u64 {
                return Err(malformed(
                    path,
                    line,
                    format!("label references unknown node id {}", record.id),
                ));
            }
            if record.label > 1 {
                return Err(malformed(
                    path,
                    line,
                    format!("label must be 0 or 1, got {}", record.label),
                ));
            }
            labels[record.id as usize] = Some(record.label);
        }
    }

    let node_labels = labels.iter().any(Option::is_some).then_some(labels);
    Ok(Dataset {
        graph,
        sequences,
        node_labels,
        vocab,
    })
}

/// Writes a dataset back out in the ingestion format: nodes in id order
/// (labels inline), edges in canonical order, newline-terminated.
pub fn write_dataset(
    dataset: &Dataset,
    nodes_path: &Path,
    edges_path: &Path,
) -> Result<(), DataError> {
    let io_err = |path: &Path, source: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        source,
    };

    let mut nodes_out = Vec::new();
    for (id, seq) in dataset.sequences.iter().enumerate() {
        let tokens: Vec<String> = seq
            .token_ids()
            .iter()
            .map(|&t| {
                dataset
                    .vocab
                    .token(t)
                    .expect("sequence ids stay inside the vocabulary")
                    .to_string()
            })
            .collect();
        let record = NodeRecord {
            id: id as u64,
            seq: tokens,
            label: dataset
                .node_labels
                .as_ref()
                .and_then(|labels| labels[id]),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        nodes_out.extend_from_slice(line.as_bytes());
        nodes_out.push(b'\n');
    }
    fs::File::create(nodes_path)
        .and_then(|mut f| f.write_all(&nodes_out))
        .map_err(|e| io_err(nodes_path, e))?;

    let mut edges_out = Vec::new();
    for &(u, v) in dataset.graph.edges() {
        let line = serde_json::to_string(&EdgeRecord {
            u: u as u64,
            v: v as u64,
        })
        .expect("record serializes");
        edges_out.extend_from_slice(line.as_bytes());
        edges_out.push(b'\n');
    }
    fs::File::create(edges_path)
        .and_then(|mut f| f.write_all(&edges_out))
        .map_err(|e| io_err(edges_path, e))?;
    Ok(())
}
