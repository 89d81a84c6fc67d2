//! Low-rank bilinear pooling kernels.
//!
//! A bilinear form x' W y is approximated by factors U V' so that the rank of
//! W stays at most d, and a pooling matrix P turns the elementwise joint
//! vector into a c-dimensional output. The full unfactorized form exists only
//! as [`full_bilinear_oracle`], a loop-level reference used to verify the
//! factorized kernels.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use rand::Rng;

/// Factors of Eq-style low-rank pooling: output component c' equals
/// x' (U diag(P[:,c']) V') y.
#[derive(Clone, Debug)]
pub struct LowRankPoolingParams {
    /// [N x d]
    pub u: Tensor,
    /// [M x d]
    pub v: Tensor,
    /// [d x c]
    pub p: Tensor,
}

impl LowRankPoolingParams {
    pub fn new(u: Tensor, v: Tensor, p: Tensor) -> Result<Self> {
        let (n, d) = (u.dim(0)?, u.dim(1)?);
        let (m, d2) = (v.dim(0)?, v.dim(1)?);
        let d3 = p.dim(0)?;
        if d != d2 || d != d3 {
            return Err(Error::Config(format!(
                "pooling rank disagrees: U has {d}, V has {d2}, P has {d3}"
            )));
        }
        if d > n.min(m) {
            return Err(Error::Config(format!(
                "rank d={d} exceeds min(N={n}, M={m})"
            )));
        }
        Ok(LowRankPoolingParams { u, v, p })
    }

    /// Variance-scaled uniform initialization: U, V in [-1/sqrt(d), 1/sqrt(d)],
    /// P in [-1/sqrt(c), 1/sqrt(c)].
    pub fn init(n: usize, m: usize, d: usize, c: usize, rng: &mut impl Rng) -> Result<Self> {
        let bu = 1.0 / (d as f64).sqrt();
        let bp = 1.0 / (c as f64).sqrt();
        LowRankPoolingParams::new(
            Tensor::uniform(&[n, d], -bu, bu, rng),
            Tensor::uniform(&[m, d], -bu, bu, rng),
            Tensor::uniform(&[d, c], -bp, bp, rng),
        )
    }

    pub fn rank(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn output_size(&self) -> usize {
        self.p.shape()[1]
    }
}

/// MFB-style factors: rank k*d elementwise pooling followed by window-k sum
/// pooling, with no projection matrix.
#[derive(Clone, Debug)]
pub struct MfbParams {
    /// [N x (k*d)]
    pub u: Tensor,
    /// [M x (k*d)]
    pub v: Tensor,
    pub window: usize,
}

impl MfbParams {
    pub fn new(u: Tensor, v: Tensor, window: usize) -> Result<Self> {
        let wide = u.dim(1)?;
        if v.dim(1)? != wide {
            return Err(Error::Config(format!(
                "factor widths disagree: {} vs {}",
                wide,
                v.shape()[1]
            )));
        }
        if window == 0 || wide % window != 0 {
            return Err(Error::InvalidArgument {
                op: "MfbParams::new",
                message: format!("width {wide} not divisible by window {window}"),
            });
        }
        Ok(MfbParams { u, v, window })
    }
}

/// Scalar low-rank bilinear form: ones' (U_i' x o V_i' y), which equals
/// x' (U_i V_i') y.
pub fn bilinear_scalar(
    tape: &mut Tape,
    x: &Tensor,
    y: &Tensor,
    u: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    let ut = tape.transpose(u)?;
    let vt = tape.transpose(v)?;
    let ux = tape.matvec(&ut, x)?;
    let vy = tape.matvec(&vt, y)?;
    let joint = tape.hadamard(&ux, &vy)?;
    Ok(tape.sum_all(&joint))
}

/// Vector low-rank bilinear pooling: f = P' (U' x o V' y).
pub fn low_rank_pool(
    tape: &mut Tape,
    x: &Tensor,
    y: &Tensor,
    params: &LowRankPoolingParams,
) -> Result<Tensor> {
    let ut = tape.transpose(&params.u)?;
    let vt = tape.transpose(&params.v)?;
    let ux = tape.matvec(&ut, x)?;
    let vy = tape.matvec(&vt, y)?;
    let joint = tape.hadamard(&ux, &vy)?;
    let pt = tape.transpose(&params.p)?;
    tape.matvec(&pt, &joint)
}

/// MFB pooling: rank k*d elementwise joint vector, then non-overlapping
/// window-k sum pooling.
pub fn mfb_pool(tape: &mut Tape, x: &Tensor, y: &Tensor, params: &MfbParams) -> Result<Tensor> {
    let ut = tape.transpose(&params.u)?;
    let vt = tape.transpose(&params.v)?;
    let ux = tape.matvec(&ut, x)?;
    let vy = tape.matvec(&vt, y)?;
    let joint = tape.hadamard(&ux, &vy)?;
    tape.sum_pool(&joint, params.window)
}

/// Loop-level evaluation of a stack of explicit bilinear forms
/// f_i = x' W_i y. Test-only reference path: no tape, no shared kernels.
pub fn full_bilinear_oracle(x: &Tensor, y: &Tensor, w_stack: &[Tensor]) -> Result<Tensor> {
    let n = x.dim(0)?;
    let m = y.dim(0)?;
    let mut out = Vec::with_capacity(w_stack.len());
    for w in w_stack {
        if w.shape() != [n, m] {
            return Err(Error::ShapeMismatch {
                op: "full_bilinear_oracle",
                lhs: vec![n, m],
                rhs: w.shape().to_vec(),
            });
        }
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..m {
                acc += x.data()[i] * w.data()[i * m + j] * y.data()[j];
            }
        }
        out.push(acc);
    }
    Ok(Tensor::vector(out))
}
