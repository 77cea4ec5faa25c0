//! Dense fp64 matrices and reverse-mode differentiation.
//!
//! All tensors are rank-2 and row-major: a scalar is `1x1`, a row vector is
//! `1xn`. Compute is always 64-bit; 32-bit floats appear only when a
//! checkpoint is written or read. Forward primitives live on [`Tape`], which
//! records every executed op so [`Tape::backward`] can replay the adjoints in
//! fixed reverse order — the same order every time, which makes gradients
//! bit-reproducible.

mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_per_param, max_relative_error, LossFn,
    DEFAULT_FD_EPS,
};
pub use tape::{Tape, TensorId, LAYER_NORM_EPS, LEAKY_RELU_SLOPE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by tensor construction, forward primitives, and the
/// gradient checker.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("tensor data has {got} entries, but shape {rows}x{cols} needs {}", rows * cols)]
    LengthMismatch { rows: usize, cols: usize, got: usize },
    #[error("row {row} has {got} entries, expected {expected}")]
    RaggedRows { row: usize, got: usize, expected: usize },
    #[error("{op}: empty axis")]
    EmptyAxis { op: &'static str },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: expected a 1x1 scalar, got {shape:?}")]
    NotScalar { op: &'static str, shape: (usize, usize) },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange { op: &'static str, index: usize, extent: usize },
    #[error("{op}: gradients through the {operand} operand are not supported")]
    GradUnsupported { op: &'static str, operand: &'static str },
    #[error("finite_difference_check: step must be positive and finite, got {eps}")]
    InvalidStep { eps: f64 },
    #[error("finite_difference_check: function is not deterministic (two evaluations of the same point differed)")]
    NonDeterministic,
}

/// A row-major matrix of `f64` values.
///
/// `requires_grad` marks leaves the backward pass should produce gradients
/// for; it is set by [`Tape::param`] and propagated to every op output that
/// depends on such a leaf.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_false")]
    requires_grad: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl Tensor {
    /// Builds a `rows x cols` tensor from row-major data.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::LengthMismatch {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Tensor {
            rows,
            cols,
            data,
            requires_grad: false,
        })
    }

    /// All-zero tensor. Zero extents are allowed; ops that cannot handle an
    /// empty axis reject it themselves.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            requires_grad: false,
        }
    }

    /// `1x1` tensor holding `value`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Builds a tensor from explicit rows, rejecting ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(TensorError::RaggedRows {
                    row: i,
                    got: row.len(),
                    expected: cols,
                });
            }
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data: rows.concat(),
            requires_grad: false,
        })
    }

    /// The `n x n` identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Entry at `(row, col)`. Panics if out of range, like slice indexing.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows && col < self.cols, "index out of range");
        self.data[row * self.cols + col]
    }

    /// Row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn set_requires_grad(&mut self, value: bool) {
        self.requires_grad = value;
    }

    /// Marks the tensor as a gradient leaf and returns it.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new(2, 3, vec![1.0; 5]).unwrap_err();
        assert_eq!(
            err,
            TensorError::LengthMismatch {
                rows: 2,
                cols: 3,
                got: 5
            }
        );
    }

    #[test]
    fn from_rows_rejects_ragged() {
        let err = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).unwrap_err();
        assert!(matches!(err, TensorError::RaggedRows { row: 1, .. }));
    }

    #[test]
    fn zero_extents_are_allowed() {
        let t = Tensor::zeros(0, 4);
        assert_eq!(t.shape(), (0, 4));
        assert!(t.is_empty());
    }

    #[test]
    fn accessors_agree_with_layout() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.get(1, 0), 3.0);
        assert_eq!(t.row(0), &[1.0, 2.0]);
        assert_eq!(t.shape(), (2, 2));
    }

    #[test]
    fn identity_has_unit_diagonal() {
        let t = Tensor::identity(3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}
