//! Row-major matrix kernels used by the tape's forward and backward passes.
//!
//! Every kernel fixes the reduction order per output element (ascending
//! index), so the parallel variants — which only split *independent output
//! rows* across threads — produce bit-identical results to the serial ones.
//! This is what lets the rest of the crate promise exact reproducibility
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work below this many multiply-adds is not worth scheduling across
/// threads; the dispatching wrappers fall back to the serial kernel.
pub const PARALLEL_MIN_FLOPS: usize = 1 << 16;

/// `A (m x k) * B (k x n)`, serial.
pub fn matmul_serial(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        matmul_row(&a[i * k..(i + 1) * k], b, k, n, &mut out[i * n..(i + 1) * n]);
    }
    out
}

/// `A (m x k) * B (k x n)` with rows of the output computed in parallel.
/// Bit-identical to [`matmul_serial`]: each output row runs the same
/// serial inner loop.
#[cfg(feature = "parallel")]
pub fn matmul_parallel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n)
        .with_min_len(4)
        .enumerate()
        .for_each(|(i, row)| matmul_row(&a[i * k..(i + 1) * k], b, k, n, row));
    out
}

/// `A * B`, choosing the parallel kernel when it pays off.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if 2 * m * k * n >= PARALLEL_MIN_FLOPS && m > 1 {
        return matmul_parallel(a, b, m, k, n);
    }
    matmul_serial(a, b, m, k, n)
}

// One output row: out_row += a_row * B. The k-ascending accumulation order
// is the determinism contract shared by all matmul variants.
fn matmul_row(a_row: &[f64], b: &[f64], k: usize, n: usize, out_row: &mut [f64]) {
    for (kk, &av) in a_row.iter().enumerate().take(k) {
        let b_row = &b[kk * n..kk * n + n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// `A (m x k) * B^T` where `B` is `n x k`, serial.
pub fn matmul_nt_serial(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        matmul_nt_row(&a[i * k..(i + 1) * k], b, k, n, &mut out[i * n..(i + 1) * n]);
    }
    out
}

/// Parallel-row variant of [`matmul_nt_serial`], bit-identical to it.
#[cfg(feature = "parallel")]
pub fn matmul_nt_parallel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n)
        .with_min_len(4)
        .enumerate()
        .for_each(|(i, row)| matmul_nt_row(&a[i * k..(i + 1) * k], b, k, n, row));
    out
}

/// `A * B^T`, choosing the parallel kernel when it pays off.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if 2 * m * k * n >= PARALLEL_MIN_FLOPS && m > 1 {
        return matmul_nt_parallel(a, b, m, k, n);
    }
    matmul_nt_serial(a, b, m, k, n)
}

fn matmul_nt_row(a_row: &[f64], b: &[f64], k: usize, n: usize, out_row: &mut [f64]) {
    for (j, o) in out_row.iter_mut().enumerate().take(n) {
        let b_row = &b[j * k..j * k + k];
        let mut acc = 0.0;
        for (&av, &bv) in a_row.iter().zip(b_row) {
            acc += av * bv;
        }
        *o = acc;
    }
}

/// `A^T (k x m) * G (m x n)` where `A` is stored `m x k`; used by matmul
/// adjoints. Output rows (one per column of `A`) are independent, so the
/// same row-parallel trick applies.
pub fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let body = |p: usize, row: &mut [f64]| {
        for i in 0..m {
            let av = a[i * k + p];
            let g_row = &g[i * n..i * n + n];
            for (o, &gv) in row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    if 2 * m * k * n >= PARALLEL_MIN_FLOPS && k > 1 {
        out.par_chunks_mut(n)
            .with_min_len(4)
            .enumerate()
            .for_each(|(p, row)| body(p, row));
        return out;
    }
    for p in 0..k {
        body(p, &mut out[p * n..(p + 1) * n]);
    }
    out
}

/// Row-wise softmax with per-row max subtraction. Rows of all `-inf`-like
/// inputs are not special-cased here; callers mask with large negative
/// finite values instead.
pub fn softmax_rows(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Per-row mean and variance (biased), shared by layer norm's forward and
/// backward passes so the two always agree.
pub fn row_moments(x: &[f64], n: usize) -> (f64, f64) {
    let mut mean = 0.0;
    for &v in x.iter().take(n) {
        mean += v;
    }
    mean /= n as f64;
    let mut var = 0.0;
    for &v in x.iter().take(n) {
        let d = v - mean;
        var += d * d;
    }
    var /= n as f64;
    (mean, var)
}

/// Numerically stable `ln(1 + e^(-|z|))` term of the logistic loss.
pub fn log1p_exp_neg_abs(z: f64) -> f64 {
    (-z.abs()).exp().ln_1p()
}

/// Logistic function, stable for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_small_case() {
        // [[1,2],[3,4]] * [[5,6],[7,8]]
        let out = matmul_serial(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 1.0, 2.0, 3.0]; // 2x3, used as B^T
        let nt = matmul_nt_serial(&a, &b, 2, 3, 2);
        // B transposed to 3x2 then plain matmul
        let bt = [7.0, 1.0, 8.0, 2.0, 9.0, 3.0];
        let plain = matmul_serial(&a, &bt, 2, 3, 2);
        assert_eq!(nt, plain);
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let g = [1.0, -1.0, 0.5, 2.0]; // 2x2
        let tn = matmul_tn(&a, &g, 2, 3, 2);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        let plain = matmul_serial(&at, &g, 3, 2, 2);
        assert_eq!(tn, plain);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matmul_is_bit_identical_to_serial() {
        // Irrational-ish values so any reassociation would show up.
        let m = 67;
        let k = 41;
        let n = 53;
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 2654435761) as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 40503) as f64).cos()).collect();
        let serial = matmul_serial(&a, &b, m, k, n);
        let parallel = matmul_parallel(&a, &b, m, k, n);
        assert!(serial
            .iter()
            .zip(&parallel)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let nt_s = matmul_nt_serial(&a, &a, m, k, m);
        let nt_p = matmul_nt_parallel(&a, &a, m, k, m);
        assert!(nt_s
            .iter()
            .zip(&nt_p)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn softmax_rows_is_row_stochastic() {
        let out = softmax_rows(&[0.0, 0.0, 2.0f64.ln(), 0.0], 2, 2);
        assert_close(&out[0..2], &[0.5, 0.5], 1e-15);
        assert_close(&out[2..4], &[2.0 / 3.0, 1.0 / 3.0], 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
