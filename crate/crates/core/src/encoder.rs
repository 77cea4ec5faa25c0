//! The sequence encoder: a small bidirectional pre-norm transformer that
//! maps one node's event-token sequence to an `M x d` token matrix.
//!
//! Width `d`, heads `h`, and depth `B` are configurable; attention is
//! bidirectional (events are unordered in time beyond their order index,
//! and the whole sequence is visible). Padding tokens are masked out of
//! attention as keys so they cannot leak into content rows — except for a
//! sequence that is entirely padding, which stands for "no events" and is
//! treated as content so downstream layers still get a defined matrix.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::EventSequence;
use crate::layers::key_mask_bias;
use crate::model::ModelError;
use crate::rng::uniform_init;
use crate::tensor::{Tape, Tensor, TensorId};

/// Architecture constants for the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// Model width `d`.
    pub dim: usize,
    /// Attention heads per block; must divide `dim`.
    pub heads: usize,
    /// Transformer blocks.
    pub blocks: usize,
    /// Longest sequence the position table covers.
    pub max_seq_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.heads == 0 {
            return Err(ModelError::InvalidConfig {
                reason: "encoder dim and heads must be positive".into(),
            });
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig {
                reason: format!(
                    "encoder dim {} is not divisible by heads {}",
                    self.dim, self.heads
                ),
            });
        }
        if self.max_seq_len == 0 {
            return Err(ModelError::InvalidConfig {
                reason: "encoder max_seq_len must be positive".into(),
            });
        }
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig {
                reason: "vocabulary must contain at least the reserved tokens".into(),
            });
        }
        Ok(())
    }
}

/// One attention head's projections, each `d x (d/h)`.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// One transformer block: pre-norm attention, then pre-norm feed-forward,
/// each with a residual connection.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub heads: Vec<HeadParams>,
    pub w_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

/// All encoder parameters.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
}

impl EncoderParams {
    /// Seeded initialization: matrix weights, embeddings and biases drawn
    /// uniform in `(-1/sqrt(d), 1/sqrt(d))`; layer-norm gains start at 1
    /// and shifts at 0. Draw order is fixed, so one seed pins every entry.
    pub fn init(config: EncoderConfig, rng: &mut ChaCha12Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.dim;
        let dh = d / config.heads;
        let bound = 1.0 / (d as f64).sqrt();
        let token_embed = uniform_init(rng, config.vocab_size, d, bound);
        let pos_embed = uniform_init(rng, config.max_seq_len, d, bound);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::new(1, d, vec![1.0; d]).expect("shape"),
                ln1_beta: Tensor::zeros(1, d),
                heads: (0..config.heads)
                    .map(|_| HeadParams {
                        w_q: uniform_init(rng, d, dh, bound),
                        w_k: uniform_init(rng, d, dh, bound),
                        w_v: uniform_init(rng, d, dh, bound),
                    })
                    .collect(),
                w_o: uniform_init(rng, d, d, bound),
                ln2_gamma: Tensor::new(1, d, vec![1.0; d]).expect("shape"),
                ln2_beta: Tensor::zeros(1, d),
                ff_w1: uniform_init(rng, d, 4 * d, bound),
                ff_b1: uniform_init(rng, 1, 4 * d, bound),
                ff_w2: uniform_init(rng, 4 * d, d, bound),
                ff_b2: uniform_init(rng, 1, d, bound),
            })
            .collect();
        Ok(EncoderParams {
            config,
            token_embed,
            pos_embed,
            blocks,
        })
    }

    /// Visits every parameter with its canonical name, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("encoder.token_embed", &self.token_embed);
        f("encoder.pos_embed", &self.pos_embed);
        for (b, block) in self.blocks.iter().enumerate() {
            f(&format!("encoder.block{b}.ln1.gamma"), &block.ln1_gamma);
            f(&format!("encoder.block{b}.ln1.beta"), &block.ln1_beta);
            for (h, head) in block.heads.iter().enumerate() {
                f(&format!("encoder.block{b}.head{h}.w_q"), &head.w_q);
                f(&format!("encoder.block{b}.head{h}.w_k"), &head.w_k);
                f(&format!("encoder.block{b}.head{h}.w_v"), &head.w_v);
            }
            f(&format!("encoder.block{b}.w_o"), &block.w_o);
            f(&format!("encoder.block{b}.ln2.gamma"), &block.ln2_gamma);
            f(&format!("encoder.block{b}.ln2.beta"), &block.ln2_beta);
            f(&format!("encoder.block{b}.ff.w1"), &block.ff_w1);
            f(&format!("encoder.block{b}.ff.b1"), &block.ff_b1);
            f(&format!("encoder.block{b}.ff.w2"), &block.ff_w2);
            f(&format!("encoder.block{b}.ff.b2"), &block.ff_b2);
        }
    }

    /// Mutable visit, same names and order as [`EncoderParams::visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("encoder.token_embed", &mut self.token_embed);
        f("encoder.pos_embed", &mut self.pos_embed);
        for (b, block) in self.blocks.iter_mut().enumerate() {
            f(&format!("encoder.block{b}.ln1.gamma"), &mut block.ln1_gamma);
            f(&format!("encoder.block{b}.ln1.beta"), &mut block.ln1_beta);
            for (h, head) in block.heads.iter_mut().enumerate() {
                f(&format!("encoder.block{b}.head{h}.w_q"), &mut head.w_q);
                f(&format!("encoder.block{b}.head{h}.w_k"), &mut head.w_k);
                f(&format!("encoder.block{b}.head{h}.w_v"), &mut head.w_v);
            }
            f(&format!("encoder.block{b}.w_o"), &mut block.w_o);
            f(&format!("encoder.block{b}.ln2.gamma"), &mut block.ln2_gamma);
            f(&format!("encoder.block{b}.ln2.beta"), &mut block.ln2_beta);
            f(&format!("encoder.block{b}.ff.w1"), &mut block.ff_w1);
            f(&format!("encoder.block{b}.ff.b1"), &mut block.ff_b1);
            f(&format!("encoder.block{b}.ff.w2"), &mut block.ff_w2);
            f(&format!("encoder.block{b}.ff.b2"), &mut block.ff_b2);
        }
    }

    /// Records all parameters on the tape. `trainable` decides between
    /// gradient leaves and constants (a frozen encoder binds constants, so
    /// backward skips its adjoints entirely).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderIds {
        let mut ids = Vec::new();
        self.visit(&mut |_, t| {
            ids.push(if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            });
        });
        let mut slots = ids.into_iter();
        EncoderIds::from_slots(&self.config, &mut || slots.next().expect("slot"))
    }
}

/// Tape handles mirroring [`HeadParams`].
#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
}

/// Tape handles mirroring [`BlockParams`].
#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub heads: Vec<HeadIds>,
    pub w_o: TensorId,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
    pub ff_w1: TensorId,
    pub ff_b1: TensorId,
    pub ff_w2: TensorId,
    pub ff_b2: TensorId,
}

/// Tape handles mirroring [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub token_embed: TensorId,
    pub pos_embed: TensorId,
    pub blocks: Vec<BlockIds>,
}

impl EncoderIds {
    /// Rebuilds the id structure from a flat id source in the exact order
    /// [`EncoderParams::visit`] emits parameters.
    pub fn from_slots(config: &EncoderConfig, next: &mut dyn FnMut() -> TensorId) -> Self {
        EncoderIds {
            token_embed: next(),
            pos_embed: next(),
            blocks: (0..config.blocks)
                .map(|_| BlockIds {
                    ln1_gamma: next(),
                    ln1_beta: next(),
                    heads: (0..config.heads)
                        .map(|_| HeadIds {
                            w_q: next(),
                            w_k: next(),
                            w_v: next(),
                        })
                        .collect(),
                    w_o: next(),
                    ln2_gamma: next(),
                    ln2_beta: next(),
                    ff_w1: next(),
                    ff_b1: next(),
                    ff_w2: next(),
                    ff_b2: next(),
                })
                .collect(),
        }
    }
}

/// Encodes one sequence into its `M x d` token matrix on the tape.
///
/// Fails if the sequence is longer than the position table (truncation is
/// the dataset's job, not the encoder's) or if a token id falls outside
/// the embedding table.
pub fn encode_sequence(
    tape: &mut Tape,
    ids: &EncoderIds,
    config: &EncoderConfig,
    seq: &EventSequence,
) -> Result<TensorId, ModelError> {
    let m = seq.len();
    if m > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: m,
            max: config.max_seq_len,
        });
    }
    for &t in seq.token_ids() {
        if t as usize >= config.vocab_size {
            return Err(ModelError::TokenOutOfVocab {
                id: t,
                vocab: config.vocab_size,
            });
        }
    }
    let dh = config.dim / config.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = key_mask_bias(tape, m, &seq.content_mask());

    let tok = tape.embed(ids.token_embed, seq.token_ids())?;
    let positions: Vec<usize> = (0..m).collect();
    let pos = tape.select_rows(ids.pos_embed, &positions)?;
    let mut x = tape.add(tok, pos)?;

    for block in &ids.blocks {
        // Attention sublayer (pre-norm).
        let normed = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta)?;
        let mut head_outputs = Vec::with_capacity(block.heads.len());
        for head in &block.heads {
            let q = tape.matmul(normed, head.w_q)?;
            let k = tape.matmul(normed, head.w_k)?;
            let v = tape.matmul(normed, head.w_v)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale)?;
            let scores = match mask {
                Some(bias) => tape.add(scores, bias)?,
                None => scores,
            };
            let attn = tape.softmax_rows(scores)?;
            head_outputs.push(tape.matmul(attn, v)?);
        }
        let merged = if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            tape.concat_cols(&head_outputs)?
        };
        let projected = tape.matmul(merged, block.w_o)?;
        x = tape.add(x, projected)?;

        // Feed-forward sublayer (pre-norm).
        let normed = tape.layer_norm(x, block.ln2_gamma, block.ln2_beta)?;
        let hidden = tape.matmul(normed, block.ff_w1)?;
        let hidden = tape.add_bias(hidden, block.ff_b1)?;
        let hidden = tape.relu(hidden)?;
        let ff = tape.matmul(hidden, block.ff_w2)?;
        let ff = tape.add_bias(ff, block.ff_b2)?;
        x = tape.add(x, ff)?;
    }
    Ok(x)
}
