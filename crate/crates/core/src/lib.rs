//! Sequence-on-graph modelling: each graph node carries an ordered event
//! sequence, a shared transformer encodes the sequences into per-node token
//! matrices, and message-passing layers exchange information between
//! neighbouring nodes' tokens before compressing to node embeddings.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), graph and dataset containers ([`graph`], [`data`]), the
//! encoder and message-passing layers ([`encoder`], [`layers`], [`model`]),
//! training loops ([`train`]), and evaluation ([`metrics`], [`eval`]).
//!
//! Everything is deterministic for a fixed seed: random state is derived
//! from labelled substreams ([`rng`]), containers iterate in index order,
//! and the parallel kernels preserve the serial reduction order.

pub mod data;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use graph::Graph;
pub use tensor::{Tape, Tensor, TensorId};
