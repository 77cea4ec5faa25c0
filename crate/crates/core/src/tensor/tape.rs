//! The Wengert list: every forward primitive appends its output tensor and
//! an op record; the backward pass replays the records in reverse and
//! accumulates adjoints additively.
//!
//! Two properties the rest of the crate leans on:
//!
//! * **Determinism.** Replay order is the fixed reverse of the recording
//!   order and every kernel fixes its reduction order, so gradients are
//!   bit-identical across runs (and across the serial/parallel kernels).
//! * **Fail-fast forward.** Every primitive scans its output for NaN/Inf
//!   and aborts with the primitive's name rather than letting a poisoned
//!   value propagate into a training step.

use super::kernels;
use super::{Tensor, TensorError};

/// Slope of the leaky rectifier. Shared with the attention-style edge
/// weighting, which is specified against this exact value.
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { a: TensorId, factor: f64, out: TensorId },
    ScaleBy { a: TensorId, factor: TensorId, out: TensorId },
    AddBias { a: TensorId, bias: TensorId, out: TensorId },
    MatMul { a: TensorId, b: TensorId, out: TensorId },
    MatMulNt { a: TensorId, b: TensorId, out: TensorId },
    Transpose { a: TensorId, out: TensorId },
    SoftmaxRows { a: TensorId, out: TensorId },
    MeanRows { a: TensorId, out: TensorId },
    SelectRows { a: TensorId, rows: Vec<usize>, out: TensorId },
    Embed { table: TensorId, ids: Vec<u32>, out: TensorId },
    ConcatCols { parts: Vec<TensorId>, out: TensorId },
    ConcatRows { parts: Vec<TensorId>, out: TensorId },
    Relu { a: TensorId, out: TensorId },
    LeakyRelu { a: TensorId, out: TensorId },
    Sigmoid { a: TensorId, out: TensorId },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, out: TensorId },
    BceWithLogits { logits: TensorId, targets: TensorId, out: TensorId },
    Sum { a: TensorId, out: TensorId },
    Mean { a: TensorId, out: TensorId },
}

/// Records forward primitives and replays their adjoints.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
    flops: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of tensors recorded so far.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Running count of forward floating-point operations, approximated as
    /// multiply-add-dominated costs (a matmul counts `2*m*k*n`). Used to
    /// measure how compute scales with input size.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.values.len());
        self.values.push(t);
        self.grads.push(None);
        id
    }

    /// Records `t` as a constant: no gradient will be produced for it.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.set_requires_grad(false);
        self.push(t)
    }

    /// Records a copy of `t` as a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> TensorId {
        self.push(t.clone().requiring_grad())
    }

    /// Records a `1x1` constant.
    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.constant(Tensor::scalar(value))
    }

    /// The tensor behind `id`.
    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.values[id.0]
    }

    /// The value of a `1x1` tensor.
    pub fn scalar_value(&self, id: TensorId) -> Result<f64, TensorError> {
        let t = self.value(id);
        if t.shape() != (1, 1) {
            return Err(TensorError::NotScalar {
                op: "scalar_value",
                shape: t.shape(),
            });
        }
        Ok(t.data()[0])
    }

    /// Gradient of the last `backward` call with respect to `id`, if `id`
    /// participated in the loss.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Like [`Tape::grad`] but materializes zeros for non-participating
    /// tensors, shaped like the value.
    pub fn grad_tensor(&self, id: TensorId) -> Tensor {
        let v = self.value(id);
        match self.grad(id) {
            Some(g) => Tensor::new(v.rows(), v.cols(), g.to_vec()).expect("grad matches value"),
            None => Tensor::zeros(v.rows(), v.cols()),
        }
    }

    // Validates finiteness, pushes the output tensor, and tags it with
    // whether any input carried gradient.
    fn finish(
        &mut self,
        op: &'static str,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let mut t = Tensor::new(rows, cols, data)?;
        t.set_requires_grad(requires_grad);
        Ok(self.push(t))
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.values[id.0].requires_grad())
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let (r, c) = ta.shape();
        self.flops += data.len() as u64;
        let rg = self.needs_grad(&[a, b]);
        let out = self.finish("add", r, c, data, rg)?;
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let (r, c) = ta.shape();
        self.flops += data.len() as u64;
        let rg = self.needs_grad(&[a, b]);
        let out = self.finish("sub", r, c, data, rg)?;
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let (r, c) = ta.shape();
        self.flops += data.len() as u64;
        let rg = self.needs_grad(&[a, b]);
        let out = self.finish("mul", r, c, data, rg)?;
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    /// Multiplies every entry by a compile-time-known constant.
    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId, TensorError> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|x| x * factor).collect();
        let (r, c) = ta.shape();
        self.flops += data.len() as u64;
        let rg = self.needs_grad(&[a]);
        let out = self.finish("scale", r, c, data, rg)?;
        self.ops.push(Op::Scale { a, factor, out });
        Ok(out)
    }

    /// Multiplies every entry by a `1x1` tensor, differentiating through
    /// both operands. This is how learned edge weights scale messages.
    pub fn scale_by(&mut self, a: TensorId, factor: TensorId) -> Result<TensorId, TensorError> {
        let tf = self.value(factor);
        if tf.shape() != (1, 1) {
            return Err(TensorError::NotScalar {
                op: "scale_by",
                shape: tf.shape(),
            });
        }
        let f = tf.data()[0];
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|x| x * f).collect();
        let (r, c) = ta.shape();
        self.flops += data.len() as u64;
        let rg = self.needs_grad(&[a, factor]);
        let out = self.finish("scale_by", r, c, data, rg)?;
        self.ops.push(Op::ScaleBy { a, factor, out });
        Ok(out)
    }

    /// Adds a `1xn` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let (r, c) = ta.shape();
        self.flops += data.len() as u64;
        let rg = self.needs_grad(&[a, bias]);
        let out = self.finish("add_bias", r, c, data, rg)?;
        self.ops.push(Op::AddBias { a, bias, out });
        Ok(out)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let (m, k) = ta.shape();
        let n = tb.cols();
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        let rg = self.needs_grad(&[a, b]);
        let out = self.finish("matmul", m, n, data, rg)?;
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    /// `A * B^T`: multiplies by the transpose of `b` without materializing
    /// it. Attention scores `Q K^T` go through here.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let (m, k) = ta.shape();
        let n = tb.rows();
        let data = kernels::matmul_nt(ta.data(), tb.data(), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        let rg = self.needs_grad(&[a, b]);
        let out = self.finish("matmul_nt", m, n, data, rg)?;
        self.ops.push(Op::MatMulNt { a, b, out });
        Ok(out)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let ta = self.value(a);
        let (m, n) = ta.shape();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        let rg = self.needs_grad(&[a]);
        let out = self.finish("transpose", n, m, data, rg)?;
        self.ops.push(Op::Transpose { a, out });
        Ok(out)
    }

    // ---- row-wise ----

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let ta = self.value(a);
        let (m, n) = ta.shape();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax_rows" });
        }
        let data = kernels::softmax_rows(ta.data(), m, n);
        self.flops += 5 * (m * n) as u64;
        let rg = self.needs_grad(&[a]);
        let out = self.finish("softmax_rows", m, n, data, rg)?;
        self.ops.push(Op::SoftmaxRows { a, out });
        Ok(out)
    }

    /// Column means: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let ta = self.value(a);
        let (m, n) = ta.shape();
        if m == 0 {
            return Err(TensorError::EmptyAxis { op: "mean_rows" });
        }
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in data.iter_mut().zip(ta.row(i)) {
                *o += v;
            }
        }
        for o in data.iter_mut() {
            *o /= m as f64;
        }
        self.flops += (m * n + n) as u64;
        let rg = self.needs_grad(&[a]);
        let out = self.finish("mean_rows", 1, n, data, rg)?;
        self.ops.push(Op::MeanRows { a, out });
        Ok(out)
    }

    /// Gathers the given rows of `a`, in order; repeats are allowed and
    /// their adjoints accumulate.
    pub fn select_rows(&mut self, a: TensorId, rows: &[usize]) -> Result<TensorId, TensorError> {
        let ta = self.value(a);
        let (m, n) = ta.shape();
        for &r in rows {
            if r >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "select_rows",
                    index: r,
                    extent: m,
                });
            }
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(ta.row(r));
        }
        let rg = self.needs_grad(&[a]);
        let out = self.finish("select_rows", rows.len(), n, data, rg)?;
        self.ops.push(Op::SelectRows {
            a,
            rows: rows.to_vec(),
            out,
        });
        Ok(out)
    }

    /// The last row of `a` as a `1xn` tensor.
    pub fn last_row(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let m = self.value(a).rows();
        if m == 0 {
            return Err(TensorError::EmptyAxis { op: "last_row" });
        }
        self.select_rows(a, &[m - 1])
    }

    /// Embedding lookup: stacks `table[ids[0]], table[ids[1]], ...` into a
    /// `len(ids) x d` matrix. Repeated ids accumulate gradient into the
    /// same table row.
    pub fn embed(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId, TensorError> {
        let tt = self.value(table);
        let (v, d) = tt.shape();
        for &id in ids {
            if id as usize >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed",
                    index: id as usize,
                    extent: v,
                });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(tt.row(id as usize));
        }
        let rg = self.needs_grad(&[table]);
        let out = self.finish("embed", ids.len(), d, data, rg)?;
        self.ops.push(Op::Embed {
            table,
            ids: ids.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Concatenates along the last axis: parts share a row count and the
    /// output gains their summed widths.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat_cols" });
        }
        let m = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape(),
                    rhs: self.value(p).shape(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.needs_grad(parts);
        let out = self.finish("concat_cols", m, total, data, rg)?;
        self.ops.push(Op::ConcatCols {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Stacks parts vertically; they share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat_rows" });
        }
        let n = self.value(parts[0]).cols();
        for &p in parts {
            if self.value(p).cols() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape(),
                    rhs: self.value(p).shape(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(total * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.needs_grad(parts);
        let out = self.finish("concat_rows", total, n, data, rg)?;
        self.ops.push(Op::ConcatRows {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let (r, c) = ta.shape();
        self.flops += data.len() as u64;
        let rg = self.needs_grad(&[a]);
        let out = self.finish("relu", r, c, data, rg)?;
        self.ops.push(Op::Relu { a, out });
        Ok(out)
    }

    /// Leaky rectifier with the fixed slope [`LEAKY_RELU_SLOPE`].
    pub fn leaky_relu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let ta = self.value(a);
        let data: Vec<f64> = ta
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { LEAKY_RELU_SLOPE * x })
            .collect();
        let (r, c) = ta.shape();
        self.flops += data.len() as u64;
        let rg = self.needs_grad(&[a]);
        let out = self.finish("leaky_relu", r, c, data, rg)?;
        self.ops.push(Op::LeakyRelu { a, out });
        Ok(out)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| kernels::sigmoid(x)).collect();
        let (r, c) = ta.shape();
        self.flops += 4 * data.len() as u64;
        let rg = self.needs_grad(&[a]);
        let out = self.finish("sigmoid", r, c, data, rg)?;
        self.ops.push(Op::Sigmoid { a, out });
        Ok(out)
    }

    /// Per-row layer normalization with learned `1xn` gain and shift.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = self.value(a).shape();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let t = self.value(id);
            if t.shape() != (1, n) {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" {
                        "layer_norm(gamma)"
                    } else {
                        "layer_norm(beta)"
                    },
                    lhs: (m, n),
                    rhs: t.shape(),
                });
            }
        }
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        let ta = self.value(a);
        let tg = self.value(gamma);
        let tb = self.value(beta);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = ta.row(i);
            let (mean, var) = kernels::row_moments(row, n);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                data[i * n + j] = tg.data()[j] * ((row[j] - mean) * inv) + tb.data()[j];
            }
        }
        self.flops += 8 * (m * n) as u64;
        let rg = self.needs_grad(&[a, gamma, beta]);
        let out = self.finish("layer_norm", m, n, data, rg)?;
        self.ops.push(Op::LayerNorm { a, gamma, beta, out });
        Ok(out)
    }

    // ---- losses and reductions ----

    /// Mean binary cross-entropy evaluated directly on logits (never
    /// materializes probabilities, so it is stable for any finite logit).
    /// `targets` is a constant; gradients flow only into `logits`.
    pub fn bce_with_logits(
        &mut self,
        logits: TensorId,
        targets: TensorId,
    ) -> Result<TensorId, TensorError> {
        self.same_shape("bce_with_logits", logits, targets)?;
        if self.value(targets).requires_grad() {
            return Err(TensorError::GradUnsupported {
                op: "bce_with_logits",
                operand: "targets",
            });
        }
        let tz = self.value(logits);
        if tz.is_empty() {
            return Err(TensorError::EmptyAxis {
                op: "bce_with_logits",
            });
        }
        let ty = self.value(targets);
        let mut acc = 0.0;
        for (&z, &y) in tz.data().iter().zip(ty.data()) {
            acc += z.max(0.0) - z * y + kernels::log1p_exp_neg_abs(z);
        }
        let loss = acc / tz.len() as f64;
        self.flops += 6 * tz.len() as u64;
        let rg = self.needs_grad(&[logits]);
        let out = self.finish("bce_with_logits", 1, 1, vec![loss], rg)?;
        self.ops.push(Op::BceWithLogits { logits, targets, out });
        Ok(out)
    }

    /// Sum of all entries, as a `1x1` tensor.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let ta = self.value(a);
        let total: f64 = ta.data().iter().sum();
        self.flops += ta.len() as u64;
        let rg = self.needs_grad(&[a]);
        let out = self.finish("sum", 1, 1, vec![total], rg)?;
        self.ops.push(Op::Sum { a, out });
        Ok(out)
    }

    /// Mean of all entries, as a `1x1` tensor.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        let total: f64 = ta.data().iter().sum();
        let v = total / ta.len() as f64;
        self.flops += ta.len() as u64 + 1;
        let rg = self.needs_grad(&[a]);
        let out = self.finish("mean", 1, 1, vec![v], rg)?;
        self.ops.push(Op::Mean { a, out });
        Ok(out)
    }

    // ---- backward ----

    /// Replays the tape in reverse, filling gradients for every tensor on
    /// the path from a parameter to `loss`. Gradients of tensors off that
    /// path stay `None` (read as exact zero). Calling this again replays
    /// from scratch and produces bit-identical results.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: lt.shape(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.values[loss.0].requires_grad() {
            // Loss does not depend on any parameter: all gradients are zero.
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..self.ops.len()).rev() {
            let op = self.ops[idx].clone();
            self.backstep(&op);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        if !self.values[id.0].requires_grad() {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grads[id.0] = Some(delta.to_vec()),
        }
    }

    fn wants(&self, id: TensorId) -> bool {
        self.values[id.0].requires_grad()
    }

    fn backstep(&mut self, op: &Op) {
        macro_rules! out_grad {
            ($out:expr) => {
                match &self.grads[$out.0] {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }
        match *op {
            Op::Add { a, b, out } => {
                let g = out_grad!(out);
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            Op::Sub { a, b, out } => {
                let g = out_grad!(out);
                self.accumulate(a, &g);
                if self.wants(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                let g = out_grad!(out);
                if self.wants(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values[b.0].data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.values[a.0].data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale { a, factor, out } => {
                let g = out_grad!(out);
                if self.wants(a) {
                    let da: Vec<f64> = g.iter().map(|gv| gv * factor).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::ScaleBy { a, factor, out } => {
                let g = out_grad!(out);
                let f = self.values[factor.0].data()[0];
                if self.wants(a) {
                    let da: Vec<f64> = g.iter().map(|gv| gv * f).collect();
                    self.accumulate(a, &da);
                }
                if self.wants(factor) {
                    let mut df = 0.0;
                    for (gv, av) in g.iter().zip(self.values[a.0].data()) {
                        df += gv * av;
                    }
                    self.accumulate(factor, &[df]);
                }
            }
            Op::AddBias { a, bias, out } => {
                let g = out_grad!(out);
                self.accumulate(a, &g);
                if self.wants(bias) {
                    let n = self.values[bias.0].cols();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, &gv) in db.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::MatMul { a, b, out } => {
                let g = out_grad!(out);
                let (m, k) = self.values[a.0].shape();
                let n = self.values[b.0].cols();
                if self.wants(a) {
                    let da = kernels::matmul_nt(&g, self.values[b.0].data(), m, n, k);
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    let db = kernels::matmul_tn(self.values[a.0].data(), &g, m, k, n);
                    self.accumulate(b, &db);
                }
            }
            Op::MatMulNt { a, b, out } => {
                let g = out_grad!(out);
                let (m, k) = self.values[a.0].shape();
                let n = self.values[b.0].rows();
                if self.wants(a) {
                    let da = kernels::matmul(&g, self.values[b.0].data(), m, n, k);
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    let db = kernels::matmul_tn(&g, self.values[a.0].data(), m, n, k);
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose { a, out } => {
                let g = out_grad!(out);
                if self.wants(a) {
                    let (m, n) = self.values[a.0].shape();
                    let mut da = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::SoftmaxRows { a, out } => {
                let g = out_grad!(out);
                if self.wants(a) {
                    let s = self.values[out.0].data();
                    let (m, n) = self.values[out.0].shape();
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let sr = &s[i * n..(i + 1) * n];
                        let mut dot = 0.0;
                        for (gv, sv) in gr.iter().zip(sr) {
                            dot += gv * sv;
                        }
                        for j in 0..n {
                            da[i * n + j] = sr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::MeanRows { a, out } => {
                let g = out_grad!(out);
                if self.wants(a) {
                    let (m, n) = self.values[a.0].shape();
                    let inv = 1.0 / m as f64;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j] * inv;
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::SelectRows { a, ref rows, out } => {
                let g = out_grad!(out);
                if self.wants(a) {
                    let (m, n) = self.values[a.0].shape();
                    let mut da = vec![0.0; m * n];
                    for (r, &src) in rows.iter().enumerate() {
                        for j in 0..n {
                            da[src * n + j] += g[r * n + j];
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::Embed { table, ref ids, out } => {
                let g = out_grad!(out);
                if self.wants(table) {
                    let (v, d) = self.values[table.0].shape();
                    let mut dt = vec![0.0; v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        let base = id as usize * d;
                        for j in 0..d {
                            dt[base + j] += g[r * d + j];
                        }
                    }
                    self.accumulate(table, &dt);
                }
            }
            Op::ConcatCols { ref parts, out } => {
                let g = out_grad!(out);
                let m = self.values[out.0].rows();
                let total = self.values[out.0].cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.values[p.0].cols();
                    if self.wants(p) {
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { ref parts, out } => {
                let g = out_grad!(out);
                let n = self.values[out.0].cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.values[p.0].rows();
                    if self.wants(p) {
                        self.accumulate(p, &g[offset * n..(offset + r) * n]);
                    }
                    offset += r;
                }
            }
            Op::Relu { a, out } => {
                let g = out_grad!(out);
                if self.wants(a) {
                    // A build with `sabotage-adjoint` doubles this adjoint so the
                    // finite-difference checker can be demonstrated to fail.
                    let fudge = if cfg!(feature = "sabotage-adjoint") { 2.0 } else { 1.0 };
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values[a.0].data())
                        .map(|(gv, &x)| if x > 0.0 { gv * fudge } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::LeakyRelu { a, out } => {
                let g = out_grad!(out);
                if self.wants(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values[a.0].data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { gv * LEAKY_RELU_SLOPE })
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Sigmoid { a, out } => {
                let g = out_grad!(out);
                if self.wants(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values[out.0].data())
                        .map(|(gv, &s)| gv * s * (1.0 - s))
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::LayerNorm { a, gamma, beta, out } => {
                let g = out_grad!(out);
                let (m, n) = self.values[a.0].shape();
                let invn = 1.0 / n as f64;
                let mut da = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let row = &self.values[a.0].data()[i * n..(i + 1) * n];
                    let (mean, var) = kernels::row_moments(row, n);
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let gr = &g[i * n..(i + 1) * n];
                    // xhat, then the usual three-term input adjoint.
                    let gamma_d = self.values[gamma.0].data();
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        let gy = gr[j] * gamma_d[j];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                    }
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        let gy = gr[j] * gamma_d[j];
                        da[i * n + j] =
                            inv * (gy - invn * sum_gy - xhat * invn * sum_gy_xhat);
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::BceWithLogits { logits, targets, out } => {
                let g = out_grad!(out)[0];
                if self.wants(logits) {
                    let count = self.values[logits.0].len() as f64;
                    let da: Vec<f64> = self.values[logits.0]
                        .data()
                        .iter()
                        .zip(self.values[targets.0].data())
                        .map(|(&z, &y)| g * (kernels::sigmoid(z) - y) / count)
                        .collect();
                    self.accumulate(logits, &da);
                }
            }
            Op::Sum { a, out } => {
                let g = out_grad!(out)[0];
                if self.wants(a) {
                    let da = vec![g; self.values[a.0].len()];
                    self.accumulate(a, &da);
                }
            }
            Op::Mean { a, out } => {
                let g = out_grad!(out)[0];
                if self.wants(a) {
                    let len = self.values[a.0].len();
                    let da = vec![g / len as f64; len];
                    self.accumulate(a, &da);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len(), "length mismatch");
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let b = tape.constant(Tensor::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap());
        let out = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_forced_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(2, 1, vec![3.0, 4.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::new(3, 2, vec![1.0; 6]).unwrap());
        let out = tape.matmul(z, b).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: (2, 3),
                rhs: (2, 3)
            }
        );
    }

    #[test]
    fn softmax_symmetry_and_analytic_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0_f64.ln(), 0.0]]).unwrap(),
        );
        let s = tape.softmax_rows(x).unwrap();
        assert_close(&tape.value(s).data()[0..2], &[0.5, 0.5], 1e-15);
        assert_close(&tape.value(s).data()[2..4], &[2.0 / 3.0, 1.0 / 3.0], 1e-12);

        let single = tape.constant(Tensor::new(1, 1, vec![5.0]).unwrap());
        let s1 = tape.softmax_rows(single).unwrap();
        assert_eq!(tape.value(s1).data(), &[1.0]);
    }

    #[test]
    fn softmax_rejects_empty_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 0));
        assert_eq!(
            tape.softmax_rows(x).unwrap_err(),
            TensorError::EmptyAxis { op: "softmax_rows" }
        );
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(1, 3, vec![0.3, -1.2, 2.0]).unwrap());
        let shifted = tape.constant(Tensor::new(1, 3, vec![100.3, 98.8, 102.0]).unwrap());
        let s1 = tape.softmax_rows(x).unwrap();
        let s2 = tape.softmax_rows(shifted).unwrap();
        let a = tape.value(s1).data().to_vec();
        let b = tape.value(s2).data().to_vec();
        assert_close(&a, &b, 1e-12);
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let p = tape.param(&Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut tape = Tape::new();
        let p = tape.param(&Tensor::scalar(3.0));
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[6.0]);
    }

    #[test]
    fn detached_parameter_gets_no_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(&Tensor::scalar(3.0));
        let q = tape.param(&Tensor::scalar(4.0));
        let loss = tape.mul(p, p).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(q).is_none());
        assert_eq!(tape.grad_tensor(q).data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.param(&Tensor::zeros(2, 2));
        let err = tape.backward(p).unwrap_err();
        assert_eq!(
            err,
            TensorError::NotScalar {
                op: "backward",
                shape: (2, 2)
            }
        );
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = p*p + p  =>  dloss/dp = 2p + 1 = 7 at p=3
        let mut tape = Tape::new();
        let p = tape.param(&Tensor::scalar(3.0));
        let sq = tape.mul(p, p).unwrap();
        let both = tape.add(sq, p).unwrap();
        let loss = tape.sum(both).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[7.0]);
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut tape = Tape::new();
        let p = tape.param(
            &Tensor::from_rows(&[vec![0.3, -1.7, 2.2], vec![0.9, 0.1, -0.4]]).unwrap(),
        );
        let w = tape.param(&Tensor::from_rows(&[vec![1.1], vec![-0.6], vec![0.25]]).unwrap());
        let prod = tape.matmul(p, w).unwrap();
        let act = tape.sigmoid(prod).unwrap();
        let loss = tape.mean(act).unwrap();
        tape.backward(loss).unwrap();
        let g1: Vec<u64> = tape.grad(p).unwrap().iter().map(|v| v.to_bits()).collect();
        tape.backward(loss).unwrap();
        let g2: Vec<u64> = tape.grad(p).unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(g1, g2);
    }

    #[test]
    fn embed_accumulates_repeated_ids() {
        let mut tape = Tape::new();
        let table = tape.param(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let seq = tape.embed(table, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(seq).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum(seq).unwrap();
        tape.backward(loss).unwrap();
        // Row 1 was gathered twice, row 0 once.
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn embed_rejects_out_of_range_id() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(2, 3));
        let err = tape.embed(table, &[2]).unwrap_err();
        assert_eq!(
            err,
            TensorError::IndexOutOfRange {
                op: "embed",
                index: 2,
                extent: 2
            }
        );
    }

    #[test]
    fn concat_cols_roundtrips_gradient_slices() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::new(2, 1, vec![1.0, 2.0]).unwrap());
        let b = tape.param(&Tensor::new(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let cat = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let weights = tape.constant(
            Tensor::new(2, 3, vec![1.0, 10.0, 100.0, 1.0, 10.0, 100.0]).unwrap(),
        );
        let weighted = tape.mul(cat, weights).unwrap();
        let loss = tape.sum(weighted).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[10.0, 100.0, 10.0, 100.0]);
    }

    #[test]
    fn select_rows_scatters_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let last = tape.last_row(a).unwrap();
        assert_eq!(tape.value(last).data(), &[5.0, 6.0]);
        let loss = tape.sum(last).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_rejected_naming_the_op() {
        let mut tape = Tape::new();
        let big = tape.constant(Tensor::scalar(1e308));
        let err = tape.mul(big, big).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "mul" });
    }

    #[test]
    fn bce_with_logits_matches_hand_value() {
        // All-zero logits against any targets: loss = ln 2.
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(1, 4));
        let y = tape.constant(Tensor::new(1, 4, vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let loss = tape.bce_with_logits(z, y).unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 2.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bce_with_logits_is_stable_for_huge_logits() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(1, 2, vec![750.0, -750.0]).unwrap());
        let y = tape.constant(Tensor::new(1, 2, vec![1.0, 0.0]).unwrap());
        let loss = tape.bce_with_logits(z, y).unwrap();
        assert_eq!(tape.scalar_value(loss).unwrap(), 0.0);
    }

    #[test]
    fn matmul_associativity_is_tight_at_fp64() {
        use crate::rng::substream;
        use rand::Rng;
        let mut rng = substream(11, "assoc");
        for _ in 0..20 {
            let rand_mat = |rng: &mut rand_chacha::ChaCha12Rng| {
                Tensor::new(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            };
            let (a, b, c) = (rand_mat(&mut rng), rand_mat(&mut rng), rand_mat(&mut rng));
            let mut tape = Tape::new();
            let (ia, ib, ic) = (tape.constant(a), tape.constant(b), tape.constant(c));
            let ab = tape.matmul(ia, ib).unwrap();
            let ab_c = tape.matmul(ab, ic).unwrap();
            let bc = tape.matmul(ib, ic).unwrap();
            let a_bc = tape.matmul(ia, bc).unwrap();
            for (x, y) in tape.value(ab_c).data().iter().zip(tape.value(a_bc).data()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
                assert!(rel < 1e-9, "associativity drift {rel}");
            }
        }
    }
}
