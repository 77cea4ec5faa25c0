//! The message-passing layer family.
//!
//! Three layer kinds share one stack: token-level cross attention (every
//! token of node `i` attends over every token of each neighbor `j`),
//! degree-normalized graph convolution over compressed vectors, and a
//! learned-attention vector layer. Edge-weight schemes and the
//! sum-vs-mean aggregator are orthogonal knobs on the token layer.
//!
//! Everything here builds onto a [`Tape`]; neighbor reductions always walk
//! the sorted adjacency list, so repeated runs are bit-identical.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::model::ModelError;
use crate::rng::uniform_init;
use crate::tensor::{Tape, Tensor, TensorId};

/// Additive pre-softmax penalty for masked attention keys. Large enough
/// that a masked key's weight underflows to exactly zero next to any
/// unmasked one.
pub const MASK_PENALTY: f64 = -1e30;

/// How neighbor messages are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
}

/// Edge-weight schemes for the token cross-attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// Every edge counts 1.
    UniformOne,
    /// `1 / |N(i)|`, normalizing by the receiving node's degree.
    MeanDegree,
    /// `1 / sqrt(deg(i) * deg(j))`, the symmetric convolution weight.
    GcnDegree,
    /// Per-target softmax of a learned score over `[z_i || z_j]`.
    Learned,
}

/// Which layer runs at a given depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "token-xattn")]
    TokenXAttn,
    #[serde(rename = "gcn")]
    Gcn,
    #[serde(rename = "edge-attn")]
    EdgeAttn,
}

/// How a token matrix collapses to a single vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressMode {
    /// Column-wise mean over content rows.
    Mean,
    /// The final content row.
    Last,
}

/// One layer's position in the stack, as written in a run configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default = "default_agg")]
    pub agg: Aggregation,
    #[serde(default = "default_scheme")]
    pub scheme: WeightScheme,
    /// Mean aggregation already divides by `|N(i)|`; combining it with
    /// the mean-degree scheme divides twice. That is almost always a
    /// configuration mistake, so it must be opted into.
    #[serde(default)]
    pub allow_double_normalization: bool,
}

fn default_agg() -> Aggregation {
    Aggregation::Mean
}

fn default_scheme() -> WeightScheme {
    WeightScheme::UniformOne
}

impl LayerSpec {
    /// A token cross-attention layer with the default mean/uniform knobs.
    pub fn token_xattn() -> Self {
        LayerSpec {
            kind: LayerKind::TokenXAttn,
            agg: default_agg(),
            scheme: default_scheme(),
            allow_double_normalization: false,
        }
    }

    /// A degree-normalized graph convolution layer.
    pub fn gcn() -> Self {
        LayerSpec {
            kind: LayerKind::Gcn,
            ..Self::token_xattn()
        }
    }

    /// A learned-attention vector layer.
    pub fn edge_attn() -> Self {
        LayerSpec {
            kind: LayerKind::EdgeAttn,
            ..Self::token_xattn()
        }
    }

    pub fn validate(&self, index: usize) -> Result<(), ModelError> {
        if self.scheme == WeightScheme::Learned && self.kind == LayerKind::Gcn {
            return Err(ModelError::InvalidLayer {
                index,
                reason: "learned edge weights require an attention layer".into(),
            });
        }
        if self.kind == LayerKind::TokenXAttn
            && self.agg == Aggregation::Mean
            && self.scheme == WeightScheme::MeanDegree
            && !self.allow_double_normalization
        {
            return Err(ModelError::InvalidLayer {
                index,
                reason: "mean aggregation with mean-degree weights divides by \
                         |N(i)| twice; set allow_double_normalization to force it"
                    .into(),
            });
        }
        Ok(())
    }
}

/// Closed-form edge weight of `j` as seen from `i`.
///
/// The learned scheme has no closed form — its weights are softmax outputs
/// living on the tape during a forward pass — so asking for it here is a
/// contract error; use [`learned_edge_weights`] with concrete summaries
/// instead.
pub fn edge_weight(
    scheme: WeightScheme,
    graph: &Graph,
    i: u32,
    j: u32,
) -> Result<f64, ModelError> {
    for node in [i, j] {
        if node as usize >= graph.num_nodes() {
            return Err(ModelError::NodeOutOfRange {
                node,
                num_nodes: graph.num_nodes(),
            });
        }
    }
    if !graph.has_edge(i, j) {
        return Err(ModelError::NotNeighbor {
            node: i,
            neighbor: j,
        });
    }
    match scheme {
        WeightScheme::UniformOne => Ok(1.0),
        WeightScheme::MeanDegree => Ok(1.0 / graph.degree(i) as f64),
        WeightScheme::GcnDegree => {
            Ok(1.0 / ((graph.degree(i) as f64) * (graph.degree(j) as f64)).sqrt())
        }
        WeightScheme::Learned => Err(ModelError::LearnedWeightOnTape),
    }
}

/// Learned attention weights over `i`'s neighborhood, computed from plain
/// (off-tape) node summaries: `softmax_j LeakyReLU(a^T [z_i || z_j])`.
///
/// Returns `(node, weight)` pairs in sorted node order. `include_self`
/// adds `i` itself to the softmax (the vector attention layer does; the
/// token layer's edge weights do not). An empty neighborhood without self
/// yields an empty list.
pub fn learned_edge_weights(
    summaries: &Tensor,
    scorer: &Tensor,
    graph: &Graph,
    i: u32,
    include_self: bool,
) -> Result<Vec<(u32, f64)>, ModelError> {
    let n = graph.num_nodes();
    if (i as usize) >= n {
        return Err(ModelError::NodeOutOfRange {
            node: i,
            num_nodes: n,
        });
    }
    let d = summaries.cols();
    if summaries.rows() != n || scorer.rows() != 2 * d || scorer.cols() != 1 {
        return Err(ModelError::InvalidConfig {
            reason: format!(
                "learned weights need N x d summaries and a 2d x 1 scorer, got {:?} and {:?}",
                summaries.shape(),
                scorer.shape()
            ),
        });
    }
    let mut nodes: Vec<u32> = graph.neighbors(i).to_vec();
    if include_self {
        let pos = nodes.partition_point(|&x| x < i);
        nodes.insert(pos, i);
    }
    if nodes.is_empty() {
        return Ok(Vec::new());
    }
    let z_i = summaries.row(i as usize);
    let head: f64 = z_i
        .iter()
        .zip(&scorer.data()[..d])
        .map(|(z, a)| z * a)
        .sum();
    let scores: Vec<f64> = nodes
        .iter()
        .map(|&j| {
            let z_j = summaries.row(j as usize);
            let tail: f64 = z_j
                .iter()
                .zip(&scorer.data()[d..])
                .map(|(z, a)| z * a)
                .sum();
            let s = head + tail;
            if s >= 0.0 {
                s
            } else {
                crate::tensor::LEAKY_RELU_SLOPE * s
            }
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(nodes
        .iter()
        .zip(exps)
        .map(|(&node, e)| (node, e / total))
        .collect())
}

/// Token cross-attention projection weights, each `d x d`. The message
/// width equals the token width so the receiving node can add the message
/// straight onto its token matrix.
#[derive(Clone, Debug)]
pub struct XAttnParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl XAttnParams {
    pub fn init(dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        XAttnParams {
            w_q: uniform_init(rng, dim, dim, bound),
            w_k: uniform_init(rng, dim, dim, bound),
            w_v: uniform_init(rng, dim, dim, bound),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> XAttnIds {
        let mut record = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        XAttnIds {
            w_q: record(&self.w_q),
            w_k: record(&self.w_k),
            w_v: record(&self.w_v),
        }
    }
}

/// Tape handles mirroring [`XAttnParams`].
#[derive(Clone, Copy, Debug)]
pub struct XAttnIds {
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
}

/// One neighbor's cross-attention output: the row-stochastic attention
/// matrix (`M_i x M_j`) and the message it produces (`M_i x d`).
#[derive(Clone, Copy, Debug)]
pub struct XAttnMessage {
    pub attention: TensorId,
    pub message: TensorId,
}

/// A `rows x len(key_content)` additive bias whose masked *columns* carry
/// [`MASK_PENALTY`]; `None` when every key is content.
pub(crate) fn key_mask_bias(
    tape: &mut Tape,
    rows: usize,
    key_content: &[bool],
) -> Option<TensorId> {
    if key_content.iter().all(|&c| c) {
        return None;
    }
    let cols = key_content.len();
    let mut data = vec![0.0; rows * cols];
    for (j, &is_content) in key_content.iter().enumerate() {
        if !is_content {
            for r in 0..rows {
                data[r * cols + j] = MASK_PENALTY;
            }
        }
    }
    Some(tape.constant(Tensor::new(rows, cols, data).expect("shape")))
}

/// Cross-attention from node `i`'s tokens over node `j`'s tokens:
/// `softmax(Q K^T / sqrt(d_h)) V` with `j`'s padding rows masked as keys.
///
/// `key_content[r]` says whether row `r` of `x_j` is a real event; a
/// sequence that is nothing but padding passes all-true (it stands for
/// "no events" and is its own content).
pub fn token_cross_attention_message(
    tape: &mut Tape,
    x_i: TensorId,
    x_j: TensorId,
    weights: &XAttnIds,
    key_content: &[bool],
) -> Result<XAttnMessage, ModelError> {
    let d_h = tape.value(weights.w_q).cols();
    let m_i = tape.value(x_i).rows();
    let q = tape.matmul(x_i, weights.w_q)?;
    let k = tape.matmul(x_j, weights.w_k)?;
    let v = tape.matmul(x_j, weights.w_v)?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d_h as f64).sqrt())?;
    let scores = match key_mask_bias(tape, m_i, key_content) {
        Some(bias) => tape.add(scores, bias)?,
        None => scores,
    };
    let attention = tape.softmax_rows(scores)?;
    let message = tape.matmul(attention, v)?;
    Ok(XAttnMessage { attention, message })
}

/// An edge weight to apply to one message: either a closed-form constant
/// or a softmax output living on the tape (a `1x1` tensor).
#[derive(Clone, Copy, Debug)]
pub enum EdgeWeightValue {
    Fixed(f64),
    OnTape(TensorId),
}

/// Combines weighted neighbor messages: `sum` is `Σ w_ij H_{i<-j}`, `mean`
/// additionally divides by the neighbor count. An empty list produces a
/// zero matrix of `shape` — an isolated node receives a zero message, not
/// an error.
pub fn aggregate_messages(
    tape: &mut Tape,
    items: &[(EdgeWeightValue, TensorId)],
    agg: Aggregation,
    shape: (usize, usize),
) -> Result<TensorId, ModelError> {
    if items.is_empty() {
        return Ok(tape.constant(Tensor::zeros(shape.0, shape.1)));
    }
    let mut total: Option<TensorId> = None;
    for &(weight, message) in items {
        let got = tape.value(message).shape();
        if got != shape {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "aggregate_messages",
                lhs: shape,
                rhs: got,
            }
            .into());
        }
        let weighted = match weight {
            EdgeWeightValue::Fixed(w) => {
                if w == 1.0 {
                    message
                } else {
                    tape.scale(message, w)?
                }
            }
            EdgeWeightValue::OnTape(w) => tape.scale_by(message, w)?,
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("items is non-empty");
    match agg {
        Aggregation::Sum => Ok(total),
        Aggregation::Mean => Ok(tape.scale(total, 1.0 / items.len() as f64)?),
    }
}

/// Collapses a token matrix to a `1 x d` vector over its content rows.
pub fn compress(
    tape: &mut Tape,
    x: TensorId,
    content: &[bool],
    mode: CompressMode,
) -> Result<TensorId, ModelError> {
    let rows = tape.value(x).rows();
    if content.len() != rows {
        return Err(ModelError::InvalidConfig {
            reason: format!(
                "compress: content mask covers {} rows but the matrix has {rows}",
                content.len()
            ),
        });
    }
    let kept: Vec<usize> = (0..rows).filter(|&r| content[r]).collect();
    if kept.is_empty() {
        return Err(ModelError::AllRowsPad);
    }
    match mode {
        CompressMode::Mean => {
            let selected = if kept.len() == rows {
                x
            } else {
                tape.select_rows(x, &kept)?
            };
            Ok(tape.mean_rows(selected)?)
        }
        CompressMode::Last => {
            let last = *kept.last().expect("non-empty");
            Ok(tape.select_rows(x, &[last])?)
        }
    }
}

/// Tape handles for one vector-space layer.
#[derive(Clone, Copy, Debug)]
pub enum VectorLayerIds {
    /// Symmetric degree-normalized convolution with self-loops.
    Gcn { weight: TensorId },
    /// Learned per-target attention over the neighborhood plus self.
    EdgeAttn {
        weight: TensorId,
        edge_scorer: TensorId,
    },
}

/// Dense `D̃^{-1/2} (A+I) D̃^{-1/2}` for the convolution layer.
fn normalized_adjacency(graph: &Graph) -> Tensor {
    let n = graph.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n as u32)
        .map(|i| 1.0 / ((graph.degree(i) + 1) as f64).sqrt())
        .collect();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = inv_sqrt[i] * inv_sqrt[i];
    }
    for &(u, v) in graph.edges() {
        let (u, v) = (u as usize, v as usize);
        let w = inv_sqrt[u] * inv_sqrt[v];
        data[u * n + v] = w;
        data[v * n + u] = w;
    }
    Tensor::new(n, n, data).expect("shape")
}

/// Splits a `2d x 1` scorer into its `z_i` half and `z_j` half.
pub(crate) fn split_scorer(
    tape: &mut Tape,
    scorer: TensorId,
    d: usize,
) -> Result<(TensorId, TensorId), ModelError> {
    let head_rows: Vec<usize> = (0..d).collect();
    let tail_rows: Vec<usize> = (d..2 * d).collect();
    let head = tape.select_rows(scorer, &head_rows)?;
    let tail = tape.select_rows(scorer, &tail_rows)?;
    Ok((head, tail))
}

/// Softmax attention weights of `target` over `nodes`, as a `k x 1`
/// column on the tape. `head_scores`/`tail_scores` are the precomputed
/// `N x 1` products of the summaries with each half of the scorer, so one
/// matmul pair is shared by every node in the layer.
pub(crate) fn attention_weight_column(
    tape: &mut Tape,
    head_scores: TensorId,
    tail_scores: TensorId,
    nodes: &[usize],
    target: usize,
) -> Result<TensorId, ModelError> {
    let own = tape.select_rows(head_scores, &[target])?;
    let neighbor_part = tape.select_rows(tail_scores, nodes)?;
    let raw = tape.add_bias(neighbor_part, own)?;
    let raw = tape.leaky_relu(raw)?;
    let row = tape.transpose(raw)?;
    let softmaxed = tape.softmax_rows(row)?;
    Ok(tape.transpose(softmaxed)?)
}

/// One vector-space layer: `ReLU(P Z W)` where `P` is either the
/// normalized adjacency (GCN) or the learned per-node attention over the
/// neighborhood including self.
pub fn vector_layer_forward(
    tape: &mut Tape,
    z: TensorId,
    graph: &Graph,
    layer: &VectorLayerIds,
) -> Result<TensorId, ModelError> {
    let (n, d) = tape.value(z).shape();
    if n != graph.num_nodes() {
        return Err(ModelError::InvalidConfig {
            reason: format!(
                "vector layer input has {n} rows but the graph has {} nodes",
                graph.num_nodes()
            ),
        });
    }
    match *layer {
        VectorLayerIds::Gcn { weight } => {
            let adj = tape.constant(normalized_adjacency(graph));
            let propagated = tape.matmul(adj, z)?;
            let projected = tape.matmul(propagated, weight)?;
            Ok(tape.relu(projected)?)
        }
        VectorLayerIds::EdgeAttn {
            weight,
            edge_scorer,
        } => {
            let (head, tail) = split_scorer(tape, edge_scorer, d)?;
            let head_scores = tape.matmul(z, head)?;
            let tail_scores = tape.matmul(z, tail)?;
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                let mut nodes: Vec<usize> = graph
                    .neighbors(i as u32)
                    .iter()
                    .map(|&j| j as usize)
                    .collect();
                let pos = nodes.partition_point(|&x| x < i);
                nodes.insert(pos, i);
                let weights =
                    attention_weight_column(tape, head_scores, tail_scores, &nodes, i)?;
                let weights_row = tape.transpose(weights)?;
                let gathered = tape.select_rows(z, &nodes)?;
                rows.push(tape.matmul(weights_row, gathered)?);
            }
            let mixed = tape.concat_rows(&rows)?;
            let projected = tape.matmul(mixed, weight)?;
            Ok(tape.relu(projected)?)
        }
    }
}
