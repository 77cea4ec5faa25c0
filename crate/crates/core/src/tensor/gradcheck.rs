//! Central-difference verification of the backward pass.
//!
//! The checker evaluates a user-supplied scalar function twice at the same
//! point (rejecting it if the results differ — the function must be
//! deterministic), takes analytic gradients from the tape, then perturbs
//! every parameter entry by `±eps` and compares. The comparison is scale
//! aware: `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`, maximized over entries.

use super::tape::{Tape, TensorId};
use super::{Tensor, TensorError};

/// Step size that balances truncation against fp64 round-off for
/// unit-scale inputs.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// A deterministic scalar-valued function of the given parameters: binds
/// them onto a fresh tape and returns the loss id.
pub type LossFn<'a> = dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError> + 'a;

/// Scale-aware worst-case disagreement between two gradient vectors.
pub fn max_relative_error(g_ad: &[f64], g_fd: &[f64]) -> f64 {
    g_ad.iter()
        .zip(g_fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn eval_loss(f: &LossFn, params: &[Tensor]) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &ids)?;
    tape.scalar_value(loss)
}

fn eval_gradients(f: &LossFn, params: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>), TensorError> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &ids)?;
    let value = tape.scalar_value(loss)?;
    tape.backward(loss)?;
    let grads = ids
        .iter()
        .map(|&id| tape.grad_tensor(id).data().to_vec())
        .collect();
    Ok((value, grads))
}

/// Compares analytic gradients against central differences, returning the
/// worst relative error per parameter (in input order).
///
/// Cost is two function evaluations per parameter entry, so keep the
/// parameters desk-sized.
pub fn finite_difference_check_per_param(
    f: &LossFn,
    params: &[Tensor],
    eps: f64,
) -> Result<Vec<f64>, TensorError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::InvalidStep { eps });
    }
    let (value, analytic) = eval_gradients(f, params)?;
    let again = eval_loss(f, params)?;
    if value.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut fd = vec![0.0; params[pi].len()];
        for e in 0..params[pi].len() {
            let original = params[pi].data()[e];
            work[pi].data_mut()[e] = original + eps;
            let up = eval_loss(f, &work)?;
            work[pi].data_mut()[e] = original - eps;
            let down = eval_loss(f, &work)?;
            work[pi].data_mut()[e] = original;
            fd[e] = (up - down) / (2.0 * eps);
        }
        errors.push(max_relative_error(&analytic[pi], &fd));
    }
    Ok(errors)
}

/// Worst relative error across all parameters; see
/// [`finite_difference_check_per_param`].
pub fn finite_difference_check(
    f: &LossFn,
    params: &[Tensor],
    eps: f64,
) -> Result<f64, TensorError> {
    let errors = finite_difference_check_per_param(f, params, eps)?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}
