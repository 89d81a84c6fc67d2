//! Pure compute kernels shared by the tape's forward and backward passes.
//!
//! Everything here operates on flat row-major buffers. Shape validation
//! happens in the tape layer; kernels assume consistent sizes.

/// C[r x t] = A[r x s] * B[s x t].
pub(crate) fn matmul(a: &[f64], b: &[f64], r: usize, s: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * t];
    for i in 0..r {
        let a_row = &a[i * s..(i + 1) * s];
        let out_row = &mut out[i * t..(i + 1) * t];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * t..(k + 1) * t];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub(crate) fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn scale(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| x * c).collect()
}

pub(crate) fn relu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.max(0.0)).collect()
}

pub(crate) fn sigmoid(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&x| sigmoid_scalar(x)).collect()
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn tanh(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.tanh()).collect()
}

/// Collapse `axis` of a rank-2 tensor: axis 0 sums rows away (per-column
/// totals), axis 1 sums columns away (per-row totals).
pub(crate) fn reduce_sum_2d(a: &[f64], rows: usize, cols: usize, axis: usize) -> Vec<f64> {
    match axis {
        0 => {
            let mut out = vec![0.0; cols];
            for i in 0..rows {
                for (o, &v) in out.iter_mut().zip(&a[i * cols..(i + 1) * cols]) {
                    *o += v;
                }
            }
            out
        }
        1 => (0..rows)
            .map(|i| a[i * cols..(i + 1) * cols].iter().sum())
            .collect(),
        _ => unreachable!("validated by caller"),
    }
}

/// Replicate a column vector `n` times: out[k][j] = v[k].
pub(crate) fn outer_broadcast(v: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() * n);
    for &x in v {
        out.extend(std::iter::repeat(x).take(n));
    }
    out
}

/// Non-overlapping window-`k` sum pooling over a flat vector.
pub(crate) fn sum_pool(a: &[f64], k: usize) -> Vec<f64> {
    a.chunks_exact(k).map(|w| w.iter().sum()).collect()
}

/// Masked, numerically stable softmax over one index group.
///
/// `keep` marks participating entries; dropped entries come out exactly 0.
/// Max subtraction skips minus-infinity logits so deliberately masked logits
/// underflow to an exact zero probability. Returns `None` when the group has
/// no unmasked finite entry.
pub(crate) fn softmax_group(
    logits: &[f64],
    keep: Option<&[bool]>,
    idx: impl Iterator<Item = usize> + Clone,
    out: &mut [f64],
) -> Option<()> {
    let kept = |i: usize| keep.map_or(true, |k| k[i]);
    let mut m = f64::NEG_INFINITY;
    for i in idx.clone() {
        if kept(i) && logits[i] > m {
            m = logits[i];
        }
    }
    if m == f64::NEG_INFINITY {
        return None;
    }
    let mut total = 0.0;
    for i in idx.clone() {
        if kept(i) {
            let e = (logits[i] - m).exp();
            out[i] = e;
            total += e;
        } else {
            out[i] = 0.0;
        }
    }
    for i in idx {
        out[i] /= total;
    }
    Some(())
}

/// Stable binary cross entropy on a logit:
/// max(z, 0) - z*t + ln(1 + exp(-|z|)).
pub(crate) fn bce_logit_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}
