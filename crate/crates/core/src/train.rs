//! Task heads, losses, negative sampling, and the training loop.
//!
//! Both tasks share one shape: a forward pass produces the `N x d`
//! embedding matrix, a task-specific scalar loss is built on the same
//! tape, and Adam applies the resulting gradients. A run is a pure
//! function of (dataset, initial parameters, config): shuffling and
//! sampling draw from fixed-label substreams of the config seed.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::graph::Graph;
use crate::model::{bridge_forward, BridgeIds, BridgeParams, ModelError, TaskHeadIds};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(
        "negative sampling for node {node}: pool has {pool} candidates, \
         but {requested} are needed"
    )]
    PoolTooSmall {
        node: u32,
        pool: usize,
        requested: usize,
    },
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("training configuration: {reason}")]
    InvalidConfig { reason: String },
    #[error("the {task} task needs {needs}")]
    MissingData {
        task: &'static str,
        needs: &'static str,
    },
}

/// Which objective drives training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "link")]
    Link,
    #[serde(rename = "fraud")]
    Node,
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Positives per step; 0 means the whole training set each step.
    pub batch_size: usize,
    pub seed: u64,
    /// Negatives drawn per positive edge during training.
    pub k_train: usize,
    /// Bind the sequence encoder as constants (the frozen baseline).
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 0,
            seed: 0,
            k_train: 5,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        // Zero is deliberately legal: a zero-rate run must leave the
        // parameters bit-identical, which is itself a tested contract.
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig {
                reason: "learning_rate must be finite and non-negative".into(),
            });
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(TrainError::InvalidConfig {
                    reason: format!("{name} must lie in [0, 1)"),
                });
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(TrainError::InvalidConfig {
                reason: "epsilon must be positive".into(),
            });
        }
        if self.k_train == 0 {
            return Err(TrainError::InvalidConfig {
                reason: "k_train must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Dot-product link score of two equal-width embeddings.
pub fn score_link(h_u: &[f64], h_v: &[f64]) -> Result<f64, TrainError> {
    if h_u.len() != h_v.len() {
        return Err(ModelError::from(TensorError::ShapeMismatch {
            op: "score_link",
            lhs: (1, h_u.len()),
            rhs: (1, h_v.len()),
        })
        .into());
    }
    Ok(h_u.iter().zip(h_v).map(|(a, b)| a * b).sum())
}

/// `K` distinct nodes drawn uniformly without replacement from
/// `{w : w != u, w not a neighbor of u, w not in forbidden}`.
///
/// The graph passed here must be the *training* graph: candidates are
/// nodes not connected to `u` by a training edge.
pub fn sample_negatives(
    graph: &Graph,
    u: u32,
    k: usize,
    rng: &mut ChaCha12Rng,
    forbidden: &[u32],
) -> Result<Vec<u32>, TrainError> {
    let mut pool: Vec<u32> = (0..graph.num_nodes() as u32)
        .filter(|&w| w != u && !graph.has_edge(u, w) && !forbidden.contains(&w))
        .collect();
    if pool.len() < k {
        return Err(TrainError::PoolTooSmall {
            node: u,
            pool: pool.len(),
            requested: k,
        });
    }
    // Partial Fisher-Yates: the first k slots become the sample.
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

/// Mean binary cross-entropy with logits over positive and negative
/// scores (labels 1 and 0), as a scalar on the tape.
pub fn link_loss(
    tape: &mut Tape,
    pos_scores: &[TensorId],
    neg_scores: &[TensorId],
) -> Result<TensorId, TrainError> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(TrainError::InvalidConfig {
            reason: "link loss needs at least one positive and one negative score".into(),
        });
    }
    let all: Vec<TensorId> = pos_scores.iter().chain(neg_scores).copied().collect();
    let logits = tape.concat_rows(&all).map_err(ModelError::from)?;
    let mut target_data = vec![1.0; pos_scores.len()];
    target_data.extend(vec![0.0; neg_scores.len()]);
    let targets = tape.constant(
        Tensor::new(all.len(), 1, target_data).expect("shape"),
    );
    Ok(tape.bce_with_logits(logits, targets).map_err(ModelError::from)?)
}

/// Per-node fraud probabilities `sigma(w . h + b)`, shape `N x 1`.
pub fn classify_nodes(
    tape: &mut Tape,
    embeddings: TensorId,
    head: TaskHeadIds,
) -> Result<TensorId, TrainError> {
    let logits = node_logits(tape, embeddings, head)?;
    Ok(tape.sigmoid(logits).map_err(ModelError::from)?)
}

fn node_logits(
    tape: &mut Tape,
    embeddings: TensorId,
    head: TaskHeadIds,
) -> Result<TensorId, TrainError> {
    let projected = tape.matmul(embeddings, head.weight).map_err(ModelError::from)?;
    Ok(tape
        .add_bias(projected, head.bias)
        .map_err(ModelError::from)?)
}

/// A trained model plus its per-epoch mean loss.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: BridgeParams,
    pub history: Vec<f64>,
}

/// Adam with per-parameter state keyed by canonical parameter name.
struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    fn new(cfg: &TrainConfig) -> Self {
        Adam {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update(&mut self, name: &str, value: &mut Tensor, grad: &[f64]) {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m_t, v_t)) in value
            .data_mut()
            .iter_mut()
            .zip(grad)
            .map(|(p, g)| (p, *g))
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m_t = self.beta1 * *m_t + (1.0 - self.beta1) * g;
            *v_t = self.beta2 * *v_t + (1.0 - self.beta2) * g * g;
            let m_hat = *m_t / bias1;
            let v_hat = *v_t / bias2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Binds parameters on the tape with their names, in visit order.
fn bind_named(
    params: &BridgeParams,
    tape: &mut Tape,
    freeze_encoder: bool,
) -> (Vec<(String, TensorId)>, BridgeIds) {
    let mut named = Vec::new();
    params.visit(&mut |name, t| {
        let id = if freeze_encoder && name.starts_with("encoder.") {
            tape.constant(t.clone())
        } else {
            tape.param(t)
        };
        named.push((name.to_string(), id));
    });
    let ids: Vec<TensorId> = named.iter().map(|&(_, id)| id).collect();
    let bridge_ids = BridgeParams::ids_from_slice(&params.config, &ids);
    (named, bridge_ids)
}

/// Splits `items` into training batches of `batch_size` (0 = everything
/// in one batch).
fn batches<T: Copy>(items: &[T], batch_size: usize) -> Vec<Vec<T>> {
    if items.is_empty() {
        return Vec::new();
    }
    if batch_size == 0 {
        return vec![items.to_vec()];
    }
    items.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Runs the optimization loop and returns the trained parameters with
/// the per-epoch mean loss history.
///
/// The link task splits edges with the config seed, message-passes over
/// the training graph only, and contrasts each training edge against
/// `k_train` sampled non-neighbors. The fraud task message-passes over
/// the full graph and fits the labeled training nodes.
pub fn train(
    dataset: &Dataset,
    params: BridgeParams,
    cfg: &TrainConfig,
    task: Task,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    params.config.validate()?;
    match task {
        Task::Link => train_link(dataset, params, cfg),
        Task::Node => train_node(dataset, params, cfg),
    }
}

/// One optimization step: forward, loss, backward, Adam — in that order.
/// Returns the scalar loss.
fn apply_step(
    tape: &mut Tape,
    loss: TensorId,
    named: &[(String, TensorId)],
    params: &mut BridgeParams,
    adam: &mut Adam,
    epoch: usize,
    step: usize,
) -> Result<f64, TrainError> {
    let loss_value = tape.scalar_value(loss).map_err(ModelError::from)?;
    if !loss_value.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch, step });
    }
    tape.backward(loss).map_err(ModelError::from)?;
    adam.begin_step();
    let mut grads: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (name, id) in named {
        if let Some(grad) = tape.grad(*id) {
            grads.insert(name, grad.to_vec());
        }
    }
    params.visit_mut(&mut |name, tensor| {
        if let Some(grad) = grads.get(name) {
            adam.update(name, tensor, grad);
        }
    });
    Ok(loss_value)
}

/// Maps a non-finite forward abort to loss diagnostics with its position
/// in the run; other errors pass through.
fn tag_non_finite(err: TrainError, epoch: usize, step: usize) -> TrainError {
    match err {
        TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => {
            TrainError::NonFiniteLoss { epoch, step }
        }
        other => other,
    }
}

fn train_link(
    dataset: &Dataset,
    mut params: BridgeParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let split = dataset.edge_split(cfg.seed);
    if split.train.is_empty() {
        return Err(TrainError::MissingData {
            task: "link",
            needs: "at least one training edge",
        });
    }
    let train_graph = split.train_graph(dataset.num_nodes())?;
    let mp_dataset = Dataset {
        graph: train_graph.clone(),
        sequences: dataset.sequences.clone(),
        node_labels: dataset.node_labels.clone(),
        vocab: dataset.vocab.clone(),
    };

    let mut shuffle_rng = substream(cfg.seed, "train-shuffle");
    let mut negative_rng = substream(cfg.seed, "train-negatives");
    let mut adam = Adam::new(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut edges = split.train.clone();
        edges.shuffle(&mut shuffle_rng);
        let mut weighted_loss = 0.0;
        let mut score_count = 0usize;

        for (step, batch) in batches(&edges, cfg.batch_size).into_iter().enumerate() {
            let mut tape = Tape::new();
            let (named, ids) = bind_named(&params, &mut tape, cfg.freeze_encoder);
            let run = (|| -> Result<(TensorId, usize), TrainError> {
                let h = bridge_forward(&mut tape, &ids, &params.config, &mp_dataset)?;
                let mut pos_scores = Vec::with_capacity(batch.len());
                let mut neg_scores = Vec::with_capacity(batch.len() * cfg.k_train);
                for &(u, v) in &batch {
                    let h_u = tape.select_rows(h, &[u as usize]).map_err(ModelError::from)?;
                    let h_v = tape.select_rows(h, &[v as usize]).map_err(ModelError::from)?;
                    pos_scores.push(
                        tape.matmul_nt(h_u, h_v).map_err(ModelError::from)?,
                    );
                    let negatives =
                        sample_negatives(&train_graph, u, cfg.k_train, &mut negative_rng, &[v])?;
                    for w in negatives {
                        // The sampler's own filter, restated as the batch
                        // invariant: never contrast against a real edge.
                        assert!(
                            w != u && w != v && !train_graph.has_edge(u, w),
                            "negative sample collides with a training edge"
                        );
                        let h_w =
                            tape.select_rows(h, &[w as usize]).map_err(ModelError::from)?;
                        neg_scores.push(
                            tape.matmul_nt(h_u, h_w).map_err(ModelError::from)?,
                        );
                    }
                }
                let count = pos_scores.len() + neg_scores.len();
                let loss = link_loss(&mut tape, &pos_scores, &neg_scores)?;
                Ok((loss, count))
            })();
            let (loss, count) = run.map_err(|e| tag_non_finite(e, epoch, step))?;
            let loss_value =
                apply_step(&mut tape, loss, &named, &mut params, &mut adam, epoch, step)?;
            weighted_loss += loss_value * count as f64;
            score_count += count;
        }
        history.push(weighted_loss / score_count as f64);
    }
    Ok(TrainOutcome { params, history })
}

fn train_node(
    dataset: &Dataset,
    mut params: BridgeParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let labels = dataset.node_labels.as_ref().ok_or(TrainError::MissingData {
        task: "fraud",
        needs: "node labels",
    })?;
    let split = dataset.node_split(cfg.seed);
    if split.train.is_empty() {
        return Err(TrainError::MissingData {
            task: "fraud",
            needs: "at least one labeled training node",
        });
    }

    let mut shuffle_rng = substream(cfg.seed, "train-shuffle");
    let mut adam = Adam::new(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut nodes = split.train.clone();
        nodes.shuffle(&mut shuffle_rng);
        let mut weighted_loss = 0.0;
        let mut example_count = 0usize;

        for (step, batch) in batches(&nodes, cfg.batch_size).into_iter().enumerate() {
            let mut tape = Tape::new();
            let (named, ids) = bind_named(&params, &mut tape, cfg.freeze_encoder);
            let run = (|| -> Result<TensorId, TrainError> {
                let h = bridge_forward(&mut tape, &ids, &params.config, dataset)?;
                let rows: Vec<usize> = batch.iter().map(|&n| n as usize).collect();
                let selected = tape.select_rows(h, &rows).map_err(ModelError::from)?;
                let logits = node_logits(&mut tape, selected, ids.head)?;
                let target_data: Vec<f64> = batch
                    .iter()
                    .map(|&n| f64::from(labels[n as usize].expect("split is labeled")))
                    .collect();
                let targets = tape.constant(
                    Tensor::new(batch.len(), 1, target_data).expect("shape"),
                );
                Ok(tape.bce_with_logits(logits, targets).map_err(ModelError::from)?)
            })();
            let loss = run.map_err(|e| tag_non_finite(e, epoch, step))?;
            let loss_value =
                apply_step(&mut tape, loss, &named, &mut params, &mut adam, epoch, step)?;
            weighted_loss += loss_value * batch.len() as f64;
            example_count += batch.len();
        }
        history.push(weighted_loss / example_count as f64);
    }
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::encoder::EncoderConfig;
    use crate::layers::{CompressMode, LayerSpec};
    use crate::model::BridgeConfig;
    use crate::rng::uniform_init;
    use crate::tensor::{finite_difference_check, DEFAULT_FD_EPS};

    fn tiny_spec(num_nodes: usize) -> SyntheticSpec {
        SyntheticSpec {
            num_nodes,
            communities: 2,
            tokens_per_node: 4,
            vocab_per_community: 6,
            intra_edge_prob: 0.6,
            inter_edge_prob: 0.05,
            fraud_communities: vec![],
        }
    }

    fn tiny_model(dataset: &Dataset, seed: u64) -> BridgeParams {
        let cfg = BridgeConfig {
            encoder: EncoderConfig {
                vocab_size: dataset.vocab.len(),
                dim: 4,
                heads: 2,
                blocks: 1,
                max_seq_len: 4,
            },
            layers: vec![LayerSpec::token_xattn()],
            compress: CompressMode::Mean,
        };
        BridgeParams::init(cfg, seed).unwrap()
    }

    #[test]
    fn score_link_basics() {
        assert_eq!(score_link(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let h = [0.5, -2.0, 1.0];
        let norm_sq = 0.25 + 4.0 + 1.0;
        assert_eq!(score_link(&h, &h).unwrap(), norm_sq);
        assert!(score_link(&[1.0], &[1.0, 2.0]).is_err());

        let mut rng = substream(0, "score-symmetry");
        for _ in 0..100 {
            let a = uniform_init(&mut rng, 1, 6, 2.0);
            let b = uniform_init(&mut rng, 1, 6, 2.0);
            assert_eq!(
                score_link(a.data(), b.data()).unwrap(),
                score_link(b.data(), a.data()).unwrap()
            );
        }
    }

    #[test]
    fn tape_and_plain_scores_agree() {
        let mut rng = substream(1, "score-tape");
        let h_val = uniform_init(&mut rng, 4, 3, 1.0);
        let mut tape = Tape::new();
        let h = tape.constant(h_val.clone());
        let h_0 = tape.select_rows(h, &[0]).unwrap();
        let h_2 = tape.select_rows(h, &[2]).unwrap();
        let s = tape.matmul_nt(h_0, h_2).unwrap();
        assert_eq!(
            tape.value(s).data()[0],
            score_link(h_val.row(0), h_val.row(2)).unwrap()
        );
    }

    #[test]
    fn sampler_takes_the_whole_pool_when_exact() {
        // u = 0 has one neighbor (1); pool is {2, 3, 4}.
        let g = Graph::new(5, [(0u32, 1u32)]).unwrap();
        let mut rng = substream(2, "sampler-exact");
        let mut got = sample_negatives(&g, 0, 3, &mut rng, &[]).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![2, 3, 4]);
    }

    #[test]
    fn sampler_is_deterministic_and_errs_on_small_pools() {
        let g = Graph::new(6, [(0u32, 1u32), (0, 2)]).unwrap();
        let a = sample_negatives(&g, 0, 2, &mut substream(3, "s"), &[]).unwrap();
        let b = sample_negatives(&g, 0, 2, &mut substream(3, "s"), &[]).unwrap();
        assert_eq!(a, b);

        let err = sample_negatives(&g, 0, 4, &mut substream(3, "s"), &[]).unwrap_err();
        match err {
            TrainError::PoolTooSmall {
                node,
                pool,
                requested,
            } => {
                assert_eq!((node, pool, requested), (0, 3, 4));
            }
            other => panic!("unexpected error {other}"),
        }
        // The forbidden list shrinks the pool further.
        assert!(matches!(
            sample_negatives(&g, 0, 3, &mut substream(3, "s"), &[5]),
            Err(TrainError::PoolTooSmall { pool: 2, .. })
        ));
    }

    #[test]
    fn sampler_is_uniform_over_the_pool() {
        // 51 nodes, u = 0 with no edges: pool is the other 50.
        let g = Graph::new(51, []).unwrap();
        let mut rng = substream(4, "sampler-uniform");
        let mut counts = vec![0u32; 51];
        for _ in 0..100_000 {
            let w = sample_negatives(&g, 0, 1, &mut rng, &[]).unwrap()[0];
            counts[w as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = 100_000.0 / 50.0;
        for (w, &c) in counts.iter().enumerate().skip(1) {
            let relative = (c as f64 - expected).abs() / expected;
            assert!(
                relative < 0.15,
                "node {w} drawn {c} times, {relative:.3} off uniform"
            );
        }
    }

    #[test]
    fn all_zero_scores_cost_ln_two() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::scalar(0.0));
        let loss = link_loss(&mut tape, &[zero, zero], &[zero, zero, zero]).unwrap();
        assert!((tape.scalar_value(loss).unwrap() - (2.0f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn separated_scores_cost_almost_nothing() {
        let mut tape = Tape::new();
        let pos = tape.constant(Tensor::scalar(20.0));
        let neg = tape.constant(Tensor::scalar(-20.0));
        let loss = link_loss(&mut tape, &[pos], &[neg]).unwrap();
        assert!(tape.scalar_value(loss).unwrap() < 1e-8);
    }

    #[test]
    fn link_loss_gradient_matches_finite_differences() {
        let mut rng = substream(5, "loss-fd");
        let scores: Vec<Tensor> = (0..5).map(|_| uniform_init(&mut rng, 1, 1, 3.0)).collect();
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let loss = link_loss(tape, &ids[..2], &ids[2..]).map_err(|e| match e {
                TrainError::Model(ModelError::Tensor(t)) => t,
                other => panic!("unexpected error {other}"),
            })?;
            Ok(loss)
        };
        let err = finite_difference_check(&f, &scores, DEFAULT_FD_EPS).unwrap();
        assert!(err < 1e-6, "loss gradient error {err}");
    }

    #[test]
    fn classifier_is_sigmoid_of_affine_score() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let head = TaskHeadIds {
            weight: tape.constant(Tensor::zeros(2, 1)),
            bias: tape.constant(Tensor::zeros(1, 1)),
        };
        let probs = classify_nodes(&mut tape, h, head).unwrap();
        assert_eq!(tape.value(probs).data(), &[0.5, 0.5]);

        // Monotone in the projection: raise the logit, raise the probability.
        let head_up = TaskHeadIds {
            weight: tape.constant(Tensor::new(2, 1, vec![1.0, 0.0]).unwrap()),
            bias: head.bias,
        };
        let probs_up = classify_nodes(&mut tape, h, head_up).unwrap();
        let v = tape.value(probs_up);
        assert!(v.get(0, 0) > 0.5 && v.get(1, 0) < 0.5);
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let mut rng = substream(6, "classify-fd");
        let h_val = uniform_init(&mut rng, 4, 3, 1.0);
        let weight = uniform_init(&mut rng, 3, 1, 1.0);
        let bias = uniform_init(&mut rng, 1, 1, 0.5);
        let targets_val = Tensor::new(4, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();

        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let h = tape.constant(h_val.clone());
            let head = TaskHeadIds {
                weight: ids[0],
                bias: ids[1],
            };
            let logits = node_logits(tape, h, head).map_err(|e| match e {
                TrainError::Model(ModelError::Tensor(t)) => t,
                other => panic!("unexpected error {other}"),
            })?;
            let targets = tape.constant(targets_val.clone());
            tape.bce_with_logits(logits, targets)
        };
        let err = finite_difference_check(&f, &[weight, bias], DEFAULT_FD_EPS).unwrap();
        assert!(err < 1e-6, "classifier gradient error {err}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let dataset = generate_synthetic(&tiny_spec(14), 7).unwrap();
        let params = tiny_model(&dataset, 7);
        let before: Vec<Vec<u64>> = {
            let mut all = Vec::new();
            params.visit(&mut |_, t| {
                all.push(t.data().iter().map(|v| v.to_bits()).collect())
            });
            all
        };
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            k_train: 2,
            seed: 7,
            ..TrainConfig::default()
        };
        let outcome = train(&dataset, params, &cfg, Task::Link).unwrap();
        let mut index = 0;
        outcome.params.visit(&mut |name, t| {
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, before[index], "{name} moved under zero learning rate");
            index += 1;
        });
        assert_eq!(outcome.history.len(), 3);
    }

    #[test]
    fn same_seed_gives_identical_history() {
        let dataset = generate_synthetic(&tiny_spec(14), 8).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            k_train: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || {
            train(&dataset, tiny_model(&dataset, 8), &cfg, Task::Link)
                .unwrap()
                .history
        };
        let a = run();
        let b = run();
        let bits = |h: &[f64]| h.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn training_reduces_the_loss() {
        let dataset = generate_synthetic(&tiny_spec(20), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            k_train: 3,
            seed: 3,
            ..TrainConfig::default()
        };
        let outcome = train(&dataset, tiny_model(&dataset, 3), &cfg, Task::Link).unwrap();
        let first = outcome.history[0];
        let last = *outcome.history.last().unwrap();
        assert!(
            last < first,
            "loss did not improve: first {first}, last {last}"
        );
    }

    #[test]
    fn every_parameter_gets_a_nonzero_gradient_within_five_epochs() {
        // The fraud objective is the one loss that reaches the whole
        // parameter set (encoder, every layer kind, head); the link
        // decoder is a parameterless dot product and never touches the
        // head. Use a stack with every layer kind so no family is idle.
        use crate::layers::{Aggregation, LayerKind, WeightScheme};
        let spec = SyntheticSpec {
            fraud_communities: vec![1],
            ..tiny_spec(14)
        };
        let dataset = generate_synthetic(&spec, 5).unwrap();
        let cfg = BridgeConfig {
            encoder: EncoderConfig {
                vocab_size: dataset.vocab.len(),
                dim: 4,
                heads: 2,
                blocks: 1,
                max_seq_len: 4,
            },
            layers: vec![
                LayerSpec {
                    kind: LayerKind::TokenXAttn,
                    agg: Aggregation::Sum,
                    scheme: WeightScheme::Learned,
                    allow_double_normalization: false,
                },
                LayerSpec::gcn(),
                LayerSpec::edge_attn(),
            ],
            compress: CompressMode::Mean,
        };
        let mut params = BridgeParams::init(cfg, 5).unwrap();
        let train_cfg = TrainConfig {
            epochs: 5,
            seed: 5,
            ..TrainConfig::default()
        };
        // Replay the training loop manually so gradients are observable.
        let labels = dataset.node_labels.as_ref().unwrap();
        let split = dataset.node_split(train_cfg.seed);
        let mut shuffle_rng = substream(train_cfg.seed, "train-shuffle");
        let mut adam = Adam::new(&train_cfg);
        let mut touched: std::collections::BTreeSet<String> = Default::default();

        for _ in 0..train_cfg.epochs {
            let mut nodes = split.train.clone();
            nodes.shuffle(&mut shuffle_rng);
            let mut tape = Tape::new();
            let (named, ids) = bind_named(&params, &mut tape, false);
            let h = bridge_forward(&mut tape, &ids, &params.config, &dataset).unwrap();
            let rows: Vec<usize> = nodes.iter().map(|&n| n as usize).collect();
            let selected = tape.select_rows(h, &rows).unwrap();
            let logits = node_logits(&mut tape, selected, ids.head).unwrap();
            let target_data: Vec<f64> = nodes
                .iter()
                .map(|&n| f64::from(labels[n as usize].unwrap()))
                .collect();
            let targets =
                tape.constant(Tensor::new(nodes.len(), 1, target_data).unwrap());
            let loss = tape.bce_with_logits(logits, targets).unwrap();
            tape.backward(loss).unwrap();
            adam.begin_step();
            let mut grads: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for (name, id) in &named {
                let grad = tape.grad(*id).expect("all parameters participate");
                if grad.iter().any(|&g| g != 0.0) {
                    touched.insert(name.clone());
                }
                grads.insert(name, grad.to_vec());
            }
            params.visit_mut(&mut |name, tensor| {
                adam.update(name, tensor, grads.get(name).unwrap());
            });
        }
        let mut all: Vec<String> = Vec::new();
        params.visit(&mut |name, _| all.push(name.to_string()));
        for name in &all {
            assert!(
                touched.contains(name),
                "{name} never received a nonzero gradient"
            );
        }
    }

    #[test]
    fn joint_training_beats_a_frozen_encoder_on_most_seeds() {
        let mut joint_wins = 0;
        for seed in 0..10u64 {
            let dataset = generate_synthetic(&tiny_spec(12), seed).unwrap();
            let cfg = TrainConfig {
                epochs: 12,
                k_train: 2,
                seed,
                ..TrainConfig::default()
            };
            let frozen_cfg = TrainConfig {
                freeze_encoder: true,
                ..cfg.clone()
            };
            let joint = train(&dataset, tiny_model(&dataset, seed), &cfg, Task::Link)
                .unwrap()
                .history;
            let frozen =
                train(&dataset, tiny_model(&dataset, seed), &frozen_cfg, Task::Link)
                    .unwrap()
                    .history;
            if joint.last().unwrap() < frozen.last().unwrap() {
                joint_wins += 1;
            }
        }
        assert!(
            joint_wins >= 6,
            "joint training won only {joint_wins}/10 seeds"
        );
    }

    #[test]
    fn node_task_trains_on_planted_fraud_labels() {
        let spec = SyntheticSpec {
            fraud_communities: vec![1],
            ..tiny_spec(16)
        };
        let dataset = generate_synthetic(&spec, 9).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            seed: 9,
            ..TrainConfig::default()
        };
        let outcome = train(&dataset, tiny_model(&dataset, 9), &cfg, Task::Node).unwrap();
        assert_eq!(outcome.history.len(), 10);
        assert!(outcome.history.last().unwrap() < &outcome.history[0]);
    }

    #[test]
    fn link_task_without_labels_is_fine_but_node_task_is_not() {
        let dataset = generate_synthetic(&tiny_spec(12), 2).unwrap();
        assert!(dataset.node_labels.is_none());
        let cfg = TrainConfig {
            epochs: 1,
            k_train: 1,
            seed: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&dataset, tiny_model(&dataset, 2), &cfg, Task::Node),
            Err(TrainError::MissingData { task: "fraud", .. })
        ));
    }

    #[test]
    fn invalid_configs_are_named() {
        let bad_lr = TrainConfig {
            learning_rate: -0.5,
            ..TrainConfig::default()
        };
        assert!(matches!(
            bad_lr.validate(),
            Err(TrainError::InvalidConfig { .. })
        ));
        let bad_beta = TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad_beta.validate().is_err());
        let bad_k = TrainConfig {
            k_train: 0,
            ..TrainConfig::default()
        };
        assert!(bad_k.validate().is_err());
    }
}
