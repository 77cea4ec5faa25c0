//! Model assembly: configuration, the parameter bundle, and the full
//! forward pass that turns a graph plus per-node event sequences into one
//! embedding per node.
//!
//! The stack keeps a token matrix per node while token-level layers run;
//! the first vector-space layer compresses that stream into one `N x d`
//! matrix, and every vector layer applies a residual on it. The final
//! embedding is the vector stream if any vector layer exists, otherwise
//! the compressed token stream.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::encoder::{encode_sequence, EncoderConfig, EncoderIds, EncoderParams};
use crate::layers::{
    aggregate_messages, attention_weight_column, compress, edge_weight, split_scorer,
    token_cross_attention_message, vector_layer_forward, CompressMode,
    EdgeWeightValue, LayerKind, LayerSpec, VectorLayerIds, WeightScheme, XAttnIds,
    XAttnParams,
};
use crate::rng::{substream, uniform_init};
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Errors raised while configuring or running the model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration: {reason}")]
    InvalidConfig { reason: String },
    #[error("layer {index}: {reason}")]
    InvalidLayer { index: usize, reason: String },
    #[error("sequence of length {len} exceeds the configured maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} is outside the vocabulary of {vocab} entries")]
    TokenOutOfVocab { id: u32, vocab: usize },
    #[error("node {node} is out of range for a graph with {num_nodes} nodes")]
    NodeOutOfRange { node: u32, num_nodes: usize },
    #[error("node {neighbor} is not a neighbor of node {node}")]
    NotNeighbor { node: u32, neighbor: u32 },
    #[error("compress: every row is padding")]
    AllRowsPad,
    #[error(
        "learned edge weights exist only on the tape during a forward pass; \
         they have no closed form"
    )]
    LearnedWeightOnTape,
}

/// Everything that defines the architecture (not the learned values).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    pub encoder: EncoderConfig,
    pub layers: Vec<LayerSpec>,
    pub compress: CompressMode,
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        let mut vector_seen = false;
        for (index, spec) in self.layers.iter().enumerate() {
            spec.validate(index)?;
            match spec.kind {
                LayerKind::TokenXAttn if vector_seen => {
                    return Err(ModelError::InvalidLayer {
                        index,
                        reason: "token layers must come before vector layers; the \
                                 token stream ends at the first vector layer"
                            .into(),
                    });
                }
                LayerKind::TokenXAttn => {}
                LayerKind::Gcn | LayerKind::EdgeAttn => vector_seen = true,
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }
}

/// Learned values for one layer of the stack.
#[derive(Clone, Debug)]
pub enum LayerParams {
    TokenXAttn {
        attn: XAttnParams,
        /// Present exactly when the layer's scheme is `learned`.
        edge_scorer: Option<Tensor>,
    },
    Gcn {
        weight: Tensor,
    },
    EdgeAttn {
        weight: Tensor,
        edge_scorer: Tensor,
    },
}

/// Tape handles mirroring [`LayerParams`].
#[derive(Clone, Debug)]
pub enum LayerIds {
    TokenXAttn {
        attn: XAttnIds,
        edge_scorer: Option<TensorId>,
    },
    Gcn {
        weight: TensorId,
    },
    EdgeAttn {
        weight: TensorId,
        edge_scorer: TensorId,
    },
}

/// The task head: a scored projection `w . h + b` of a node embedding.
#[derive(Clone, Debug)]
pub struct TaskHeadParams {
    /// `d x 1`.
    pub weight: Tensor,
    /// `1 x 1`.
    pub bias: Tensor,
}

/// Tape handles mirroring [`TaskHeadParams`].
#[derive(Clone, Copy, Debug)]
pub struct TaskHeadIds {
    pub weight: TensorId,
    pub bias: TensorId,
}

/// The complete set of learned values.
#[derive(Clone, Debug)]
pub struct BridgeParams {
    pub config: BridgeConfig,
    pub encoder: EncoderParams,
    pub layers: Vec<LayerParams>,
    pub head: TaskHeadParams,
}

/// Tape handles mirroring [`BridgeParams`].
#[derive(Clone, Debug)]
pub struct BridgeIds {
    pub encoder: EncoderIds,
    pub layers: Vec<LayerIds>,
    pub head: TaskHeadIds,
}

impl BridgeParams {
    /// Seeded initialization of every parameter, drawn from one fixed-order
    /// stream so a seed pins the whole model.
    pub fn init(config: BridgeConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = substream(seed, "init");
        let d = config.dim();
        let bound = 1.0 / (d as f64).sqrt();
        let encoder = EncoderParams::init(config.encoder.clone(), &mut rng)?;
        let layers = config
            .layers
            .iter()
            .map(|spec| init_layer(spec, d, bound, &mut rng))
            .collect();
        let head = TaskHeadParams {
            weight: uniform_init(&mut rng, d, 1, bound),
            bias: Tensor::zeros(1, 1),
        };
        Ok(BridgeParams {
            config,
            encoder,
            layers,
            head,
        })
    }

    /// Visits every parameter with its canonical name, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(f);
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::TokenXAttn { attn, edge_scorer } => {
                    f(&format!("layer{l}.w_q"), &attn.w_q);
                    f(&format!("layer{l}.w_k"), &attn.w_k);
                    f(&format!("layer{l}.w_v"), &attn.w_v);
                    if let Some(scorer) = edge_scorer {
                        f(&format!("layer{l}.attn"), scorer);
                    }
                }
                LayerParams::Gcn { weight } => f(&format!("layer{l}.w"), weight),
                LayerParams::EdgeAttn {
                    weight,
                    edge_scorer,
                } => {
                    f(&format!("layer{l}.w"), weight);
                    f(&format!("layer{l}.attn"), edge_scorer);
                }
            }
        }
        f("head.w", &self.head.weight);
        f("head.b", &self.head.bias);
    }

    /// Mutable visit, same names and order as [`BridgeParams::visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(f);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerParams::TokenXAttn { attn, edge_scorer } => {
                    f(&format!("layer{l}.w_q"), &mut attn.w_q);
                    f(&format!("layer{l}.w_k"), &mut attn.w_k);
                    f(&format!("layer{l}.w_v"), &mut attn.w_v);
                    if let Some(scorer) = edge_scorer {
                        f(&format!("layer{l}.attn"), scorer);
                    }
                }
                LayerParams::Gcn { weight } => f(&format!("layer{l}.w"), weight),
                LayerParams::EdgeAttn {
                    weight,
                    edge_scorer,
                } => {
                    f(&format!("layer{l}.w"), weight);
                    f(&format!("layer{l}.attn"), edge_scorer);
                }
            }
        }
        f("head.w", &mut self.head.weight);
        f("head.b", &mut self.head.bias);
    }

    /// `(name, shape)` for every parameter, in visit order — the contract a
    /// checkpoint must match exactly.
    pub fn catalog(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.shape())));
        out
    }

    /// Records every parameter on the tape as a gradient leaf, except that
    /// `freeze_encoder` binds the encoder's parameters as constants.
    pub fn bind(&self, tape: &mut Tape, freeze_encoder: bool) -> BridgeIds {
        let mut ids = Vec::new();
        self.visit(&mut |name, t| {
            ids.push(if freeze_encoder && name.starts_with("encoder.") {
                tape.constant(t.clone())
            } else {
                tape.param(t)
            });
        });
        Self::ids_from_slice(&self.config, &ids)
    }

    /// Records every parameter as a constant — for inference, where no
    /// gradient buffers are needed.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BridgeIds {
        let mut ids = Vec::new();
        self.visit(&mut |_, t| ids.push(tape.constant(t.clone())));
        Self::ids_from_slice(&self.config, &ids)
    }

    /// Rebuilds the id structure from ids listed in visit order.
    pub fn ids_from_slice(config: &BridgeConfig, ids: &[TensorId]) -> BridgeIds {
        let mut slots = ids.iter().copied();
        let mut next = || slots.next().expect("one id per parameter");
        let encoder = EncoderIds::from_slots(&config.encoder, &mut next);
        let layers = config
            .layers
            .iter()
            .map(|spec| match spec.kind {
                LayerKind::TokenXAttn => LayerIds::TokenXAttn {
                    attn: XAttnIds {
                        w_q: next(),
                        w_k: next(),
                        w_v: next(),
                    },
                    edge_scorer: (spec.scheme == WeightScheme::Learned).then(&mut next),
                },
                LayerKind::Gcn => LayerIds::Gcn { weight: next() },
                LayerKind::EdgeAttn => LayerIds::EdgeAttn {
                    weight: next(),
                    edge_scorer: next(),
                },
            })
            .collect();
        let head = TaskHeadIds {
            weight: next(),
            bias: next(),
        };
        assert!(slots.next().is_none(), "more ids than parameters");
        BridgeIds {
            encoder,
            layers,
            head,
        }
    }
}

fn init_layer(spec: &LayerSpec, d: usize, bound: f64, rng: &mut ChaCha12Rng) -> LayerParams {
    match spec.kind {
        LayerKind::TokenXAttn => {
            let attn = XAttnParams::init(d, rng);
            let edge_scorer = (spec.scheme == WeightScheme::Learned)
                .then(|| uniform_init(rng, 2 * d, 1, bound));
            LayerParams::TokenXAttn { attn, edge_scorer }
        }
        LayerKind::Gcn => LayerParams::Gcn {
            weight: uniform_init(rng, d, d, bound),
        },
        LayerKind::EdgeAttn => LayerParams::EdgeAttn {
            weight: uniform_init(rng, d, d, bound),
            edge_scorer: uniform_init(rng, 2 * d, 1, bound),
        },
    }
}

/// The gradient-check / reporting group a parameter belongs to.
pub fn parameter_group(name: &str) -> &'static str {
    if name.starts_with("encoder.") {
        "encoder"
    } else if name.starts_with("head.") {
        "head"
    } else if name.ends_with(".w_q") {
        "w_q"
    } else if name.ends_with(".w_k") {
        "w_k"
    } else if name.ends_with(".w_v") {
        "w_v"
    } else if name.ends_with(".attn") {
        "edge_attention"
    } else if name.ends_with(".w") {
        "vector_layers"
    } else {
        "other"
    }
}

/// Per-node content masks, shared by masking and compression.
fn content_masks(dataset: &Dataset) -> Vec<Vec<bool>> {
    dataset
        .sequences
        .iter()
        .map(|seq| seq.content_mask())
        .collect()
}

/// Compresses every node's token matrix and stacks the rows to `N x d`.
fn compress_stream(
    tape: &mut Tape,
    xs: &[TensorId],
    masks: &[Vec<bool>],
    mode: CompressMode,
) -> Result<TensorId, ModelError> {
    let rows = xs
        .iter()
        .zip(masks)
        .map(|(&x, mask)| compress(tape, x, mask, mode))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tape.concat_rows(&rows)?)
}

/// Runs the full stack and returns the `N x d` matrix of node embeddings.
pub fn bridge_forward(
    tape: &mut Tape,
    ids: &BridgeIds,
    config: &BridgeConfig,
    dataset: &Dataset,
) -> Result<TensorId, ModelError> {
    let n = dataset.num_nodes();
    if n == 0 {
        return Err(ModelError::InvalidConfig {
            reason: "dataset has no nodes".into(),
        });
    }
    if dataset.vocab.len() != config.encoder.vocab_size {
        return Err(ModelError::InvalidConfig {
            reason: format!(
                "dataset vocabulary has {} entries but the encoder expects {}",
                dataset.vocab.len(),
                config.encoder.vocab_size
            ),
        });
    }
    let graph = &dataset.graph;
    let masks = content_masks(dataset);
    let d = config.dim();

    let mut xs: Vec<TensorId> = dataset
        .sequences
        .iter()
        .map(|seq| encode_sequence(tape, &ids.encoder, &config.encoder, seq))
        .collect::<Result<_, _>>()?;
    let mut vector_stream: Option<TensorId> = None;

    for (spec, layer) in config.layers.iter().zip(&ids.layers) {
        match (spec.kind, layer) {
            (LayerKind::TokenXAttn, LayerIds::TokenXAttn { attn, edge_scorer }) => {
                // Learned weights need a per-node summary of the *current*
                // token stream; one matmul pair is shared across nodes.
                let learned_scores = match edge_scorer {
                    Some(scorer) => {
                        let z = compress_stream(tape, &xs, &masks, config.compress)?;
                        let (head, tail) = split_scorer(tape, *scorer, d)?;
                        Some((tape.matmul(z, head)?, tape.matmul(z, tail)?))
                    }
                    None => None,
                };
                let mut next_xs = Vec::with_capacity(n);
                for i in 0..n {
                    let neighbors = graph.neighbors(i as u32);
                    if neighbors.is_empty() {
                        // Zero aggregate; the residual leaves X_i as is.
                        next_xs.push(xs[i]);
                        continue;
                    }
                    let weight_column = match learned_scores {
                        Some((head_scores, tail_scores)) => {
                            let nodes: Vec<usize> =
                                neighbors.iter().map(|&j| j as usize).collect();
                            Some(attention_weight_column(
                                tape,
                                head_scores,
                                tail_scores,
                                &nodes,
                                i,
                            )?)
                        }
                        None => None,
                    };
                    let mut items = Vec::with_capacity(neighbors.len());
                    for (k, &j) in neighbors.iter().enumerate() {
                        let weight = match weight_column {
                            Some(column) => {
                                EdgeWeightValue::OnTape(tape.select_rows(column, &[k])?)
                            }
                            None => EdgeWeightValue::Fixed(edge_weight(
                                spec.scheme,
                                graph,
                                i as u32,
                                j,
                            )?),
                        };
                        let message = token_cross_attention_message(
                            tape,
                            xs[i],
                            xs[j as usize],
                            attn,
                            &masks[j as usize],
                        )?;
                        items.push((weight, message.message));
                    }
                    let shape = tape.value(xs[i]).shape();
                    let h = aggregate_messages(tape, &items, spec.agg, shape)?;
                    next_xs.push(tape.add(xs[i], h)?);
                }
                xs = next_xs;
            }
            (_, layer_ids) => {
                let z = match vector_stream {
                    Some(z) => z,
                    None => compress_stream(tape, &xs, &masks, config.compress)?,
                };
                let vector_ids = match *layer_ids {
                    LayerIds::Gcn { weight } => VectorLayerIds::Gcn { weight },
                    LayerIds::EdgeAttn {
                        weight,
                        edge_scorer,
                    } => VectorLayerIds::EdgeAttn {
                        weight,
                        edge_scorer,
                    },
                    LayerIds::TokenXAttn { .. } => unreachable!("validated stack order"),
                };
                let update = vector_layer_forward(tape, z, graph, &vector_ids)?;
                vector_stream = Some(tape.add(z, update)?);
            }
        }
    }

    match vector_stream {
        Some(z) => Ok(z),
        None => compress_stream(tape, &xs, &masks, config.compress),
    }
}
