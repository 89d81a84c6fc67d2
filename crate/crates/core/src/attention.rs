//! The three attention mechanisms: bilinear, unitary, and co-attention.
//!
//! Bilinear attention scores every (question channel, visual channel) pair
//! with a low-rank bilinear form, normalizes the whole grid into a joint
//! distribution, and uses that grid as the middle factor of a second bilinear
//! form evaluated by matrix chains. The chain form is checked against
//! [`ban_oracle`], a literal double-sum evaluation.
//!
//! Weight matrices here are application oriented: a map taking R^in to R^out
//! is stored as [out x in] and applied by left multiplication.

use crate::error::{Error, Result};
use crate::tensor::{NormScope, Tape, Tensor};
use rand::Rng;
use std::io::Write;

/// Linear (plain chain) or relu-wrapped projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Form {
    Linear,
    Relu,
}

impl Form {
    pub fn apply(self, tape: &mut Tape, t: &Tensor) -> Tensor {
        match self {
            Form::Linear => t.clone(),
            Form::Relu => tape.relu(t),
        }
    }
}

/// Normalization scope for the bilinear map: jointly over all rho x phi
/// cells (the default; marginalization over the grid presupposes a joint
/// distribution), or per question-channel row for comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapScope {
    Joint,
    PerRow,
}

/// Validity of the phi visual channels of one example. Padded detector slots
/// are masked; question channels are always fully valid at desk scale.
#[derive(Clone, Debug)]
pub struct ChannelMask {
    keep: Vec<bool>,
}

impl ChannelMask {
    pub fn new(keep: Vec<bool>) -> Result<Self> {
        if keep.iter().all(|&b| !b) {
            return Err(Error::EmptyAttentionGroup);
        }
        Ok(ChannelMask { keep })
    }

    /// All `phi` channels valid.
    pub fn full(phi: usize) -> Self {
        ChannelMask {
            keep: vec![true; phi],
        }
    }

    /// First `valid` of `phi` channels valid, the rest padding.
    pub fn prefix(valid: usize, phi: usize) -> Result<Self> {
        if valid == 0 || valid > phi {
            return Err(Error::InvalidArgument {
                op: "ChannelMask::prefix",
                message: format!("valid count {valid} out of 1..={phi}"),
            });
        }
        let keep = (0..phi).map(|i| i < valid).collect();
        Ok(ChannelMask { keep })
    }

    pub fn phi(&self) -> usize {
        self.keep.len()
    }

    pub fn valid_count(&self) -> usize {
        self.keep.iter().filter(|&&b| b).count()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    /// Expand to a rho x phi cell mask: a masked channel masks its column.
    pub fn grid(&self, rho: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(rho * self.keep.len());
        for _ in 0..rho {
            out.extend_from_slice(&self.keep);
        }
        out
    }

    /// Repeat across `rows` attention heads.
    pub fn rows(&self, rows: usize) -> Vec<bool> {
        self.grid(rows)
    }
}

/// Parameters of a G-glimpse bilinear attention stack. The attention factors
/// `att_u`, `att_v` are shared across glimpses; the pooling vector `p` and
/// the value factors are per glimpse.
#[derive(Clone, Debug)]
pub struct GlimpseParams {
    /// [K' x N], question side of the attention logits.
    pub att_u: Tensor,
    /// [K' x M], visual side of the attention logits.
    pub att_v: Tensor,
    /// Per glimpse [K'].
    pub p: Vec<Tensor>,
    /// Per glimpse [K x N], question side of the value chain.
    pub val_u: Vec<Tensor>,
    /// Per glimpse [K x M], visual side of the value chain.
    pub val_v: Vec<Tensor>,
}

impl GlimpseParams {
    pub fn new(
        att_u: Tensor,
        att_v: Tensor,
        p: Vec<Tensor>,
        val_u: Vec<Tensor>,
        val_v: Vec<Tensor>,
    ) -> Result<Self> {
        let k_att = att_u.dim(0)?;
        if att_v.dim(0)? != k_att {
            return Err(Error::Config(format!(
                "attention factor widths disagree: {} vs {}",
                k_att,
                att_v.shape()[0]
            )));
        }
        let g = p.len();
        if val_u.len() != g || val_v.len() != g || g == 0 {
            return Err(Error::Config(format!(
                "glimpse counts disagree: p {}, val_u {}, val_v {}",
                g,
                val_u.len(),
                val_v.len()
            )));
        }
        for pg in &p {
            if pg.shape() != [k_att] {
                return Err(Error::Config("pooling vector width mismatch".into()));
            }
        }
        Ok(GlimpseParams {
            att_u,
            att_v,
            p,
            val_u,
            val_v,
        })
    }

    pub fn glimpses(&self) -> usize {
        self.p.len()
    }

    pub fn init(
        n: usize,
        m: usize,
        k: usize,
        k_att: usize,
        glimpses: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bp = (6.0 / k_att as f64).sqrt();
        GlimpseParams::new(
            Tensor::uniform(&[k_att, n], -(6.0 / n as f64).sqrt(), (6.0 / n as f64).sqrt(), rng),
            Tensor::uniform(&[k_att, m], -(6.0 / m as f64).sqrt(), (6.0 / m as f64).sqrt(), rng),
            (0..glimpses)
                .map(|_| Tensor::uniform(&[k_att], -bp, bp, rng))
                .collect(),
            (0..glimpses)
                .map(|_| Tensor::uniform(&[k, n], -(6.0 / n as f64).sqrt(), (6.0 / n as f64).sqrt(), rng))
                .collect(),
            (0..glimpses)
                .map(|_| Tensor::uniform(&[k, m], -(6.0 / m as f64).sqrt(), (6.0 / m as f64).sqrt(), rng))
                .collect(),
        )
    }
}

/// One glimpse's joint attention distribution plus the raw logits the
/// counter hook reads.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    /// [rho x phi], nonnegative, masked columns exactly zero.
    pub probs: Tensor,
    /// [rho x phi] pre-softmax logits.
    pub logits: Tensor,
    /// Visual-channel validity the map was normalized under.
    pub valid_cols: Vec<bool>,
}

/// Attention logits for glimpse `g`:
/// A[i][j] = p_g' (sigma(att_u X_i) o sigma(att_v Y_j)), evaluated as the
/// matrix chain transpose((p_g 1') o sigma(att_u X)) sigma(att_v Y).
pub fn bilinear_logits(
    tape: &mut Tape,
    x: &Tensor,
    y: &Tensor,
    params: &GlimpseParams,
    g: usize,
    form: Form,
) -> Result<Tensor> {
    let rho = x.dim(1)?;
    let ux = tape.matmul(&params.att_u, x)?;
    let ux = form.apply(tape, &ux);
    let vy = tape.matmul(&params.att_v, y)?;
    let vy = form.apply(tape, &vy);
    let pb = tape.outer_broadcast(&params.p[g], rho)?;
    let weighted = tape.hadamard(&pb, &ux)?;
    let wt = tape.transpose(&weighted)?;
    tape.matmul(&wt, &vy)
}

/// Normalize bilinear logits into an attention map. Masked visual channels
/// are forced to zero probability before normalization; under the joint
/// scope the whole grid sums to one per glimpse.
pub fn bilinear_attention_map(
    tape: &mut Tape,
    logits: &Tensor,
    mask: &ChannelMask,
    scope: MapScope,
) -> Result<AttentionMap> {
    let rho = logits.dim(0)?;
    let phi = logits.dim(1)?;
    if mask.phi() != phi {
        return Err(Error::ShapeMismatch {
            op: "bilinear_attention_map",
            lhs: logits.shape().to_vec(),
            rhs: vec![mask.phi()],
        });
    }
    let keep = mask.grid(rho);
    let norm = match scope {
        MapScope::Joint => NormScope::Joint,
        MapScope::PerRow => NormScope::Rows,
    };
    let probs = tape.masked_softmax(logits, Some(&keep), norm)?;
    Ok(AttentionMap {
        probs,
        logits: logits.clone(),
        valid_cols: mask.keep().to_vec(),
    })
}

/// The BAN operator for one glimpse: f'_k = sigma(X' U')_k' A sigma(Y' V')_k,
/// computed by matrix chains in O(K M phi) for a single glimpse.
pub fn ban_apply(
    tape: &mut Tape,
    x: &Tensor,
    y: &Tensor,
    map: &AttentionMap,
    val_u: &Tensor,
    val_v: &Tensor,
    form: Form,
) -> Result<Tensor> {
    let xu = tape.matmul(val_u, x)?;
    let xu = form.apply(tape, &xu);
    let yv = tape.matmul(val_v, y)?;
    let yv = form.apply(tape, &yv);
    let xa = tape.matmul(&xu, &map.probs)?;
    let prod = tape.hadamard(&xa, &yv)?;
    tape.reduce_sum(&prod, 1)
}

/// Literal double-sum evaluation of the BAN operator:
/// f'_k = sum_i sum_j A[i][j] sigma(X_i' U'_k) sigma(V'_k' Y_j).
/// Reference path only: plain index loops, no tape, no shared kernels.
pub fn ban_oracle(
    x: &Tensor,
    y: &Tensor,
    probs: &Tensor,
    val_u: &Tensor,
    val_v: &Tensor,
    form: Form,
) -> Result<Tensor> {
    let (n, rho) = (x.dim(0)?, x.dim(1)?);
    let (m, phi) = (y.dim(0)?, y.dim(1)?);
    let k_out = val_u.dim(0)?;
    if val_u.dim(1)? != n || val_v.dim(1)? != m || val_v.dim(0)? != k_out {
        return Err(Error::ShapeMismatch {
            op: "ban_oracle",
            lhs: val_u.shape().to_vec(),
            rhs: val_v.shape().to_vec(),
        });
    }
    let sigma = |v: f64| match form {
        Form::Linear => v,
        Form::Relu => v.max(0.0),
    };
    let mut out = vec![0.0; k_out];
    for (k, slot) in out.iter_mut().enumerate() {
        // Channel projections by explicit loops.
        let proj_x: Vec<f64> = (0..rho)
            .map(|i| {
                let mut acc = 0.0;
                for nn in 0..n {
                    acc += val_u.data()[k * n + nn] * x.data()[nn * rho + i];
                }
                sigma(acc)
            })
            .collect();
        let proj_y: Vec<f64> = (0..phi)
            .map(|j| {
                let mut acc = 0.0;
                for mm in 0..m {
                    acc += val_v.data()[k * m + mm] * y.data()[mm * phi + j];
                }
                sigma(acc)
            })
            .collect();
        let mut acc = 0.0;
        for i in 0..rho {
            for j in 0..phi {
                acc += probs.data()[i * phi + j] * proj_x[i] * proj_y[j];
            }
        }
        *slot = acc;
    }
    Ok(Tensor::vector(out))
}

/// Unitary attention over one multi-channel input conditioned on a single
/// query vector.
#[derive(Clone, Debug)]
pub struct UnitaryParams {
    /// [d x N] query side.
    pub u: Tensor,
    /// [d x M] visual side.
    pub v: Tensor,
    /// [G x d] per-glimpse pooling rows.
    pub p: Tensor,
}

impl UnitaryParams {
    pub fn init(n: usize, m: usize, d: usize, glimpses: usize, rng: &mut impl Rng) -> Self {
        let bn = (6.0 / n as f64).sqrt();
        let bm = (6.0 / m as f64).sqrt();
        let bd = (6.0 / d as f64).sqrt();
        UnitaryParams {
            u: Tensor::uniform(&[d, n], -bn, bn, rng),
            v: Tensor::uniform(&[d, m], -bm, bm, rng),
            p: Tensor::uniform(&[glimpses, d], -bd, bd, rng),
        }
    }

    pub fn glimpses(&self) -> usize {
        self.p.shape()[0]
    }
}

/// Result of unitary attention: the concatenated per-glimpse convex
/// combinations [G*M], the attention rows [G x phi], and their pre-softmax
/// logits.
#[derive(Clone, Debug)]
pub struct UnitaryOutcome {
    pub attended: Tensor,
    pub alpha: Tensor,
    pub logits: Tensor,
}

/// Selectively combine the phi channels of `y` under a query `x`.
pub fn unitary_attention(
    tape: &mut Tape,
    x: &Tensor,
    y: &Tensor,
    params: &UnitaryParams,
    mask: &ChannelMask,
    form: Form,
) -> Result<UnitaryOutcome> {
    let phi = y.dim(1)?;
    if mask.phi() != phi {
        return Err(Error::ShapeMismatch {
            op: "unitary_attention",
            lhs: y.shape().to_vec(),
            rhs: vec![mask.phi()],
        });
    }
    let glimpses = params.glimpses();
    let ux = tape.matvec(&params.u, x)?;
    let ux = form.apply(tape, &ux);
    let uxb = tape.outer_broadcast(&ux, phi)?;
    let vy = tape.matmul(&params.v, y)?;
    let vy = form.apply(tape, &vy);
    let joint = tape.hadamard(&uxb, &vy)?;
    let logits = tape.matmul(&params.p, &joint)?;
    let keep = mask.rows(glimpses);
    let alpha = tape.masked_softmax(&logits, Some(&keep), NormScope::Rows)?;
    // Columns of Y alpha' are exactly the per-glimpse attended vectors.
    let at = tape.transpose(&alpha)?;
    let attended = tape.matmul(y, &at)?;
    let rows = tape.transpose(&attended)?;
    let m = y.dim(0)?;
    let attended = tape.reshape(&rows, &[glimpses * m])?;
    Ok(UnitaryOutcome {
        attended,
        alpha,
        logits,
    })
}

#[derive(Clone, Debug)]
pub struct CoAttentionParams {
    /// [d x N] channel side of the question self-attention score.
    pub self_u: Tensor,
    /// [d x N] context side, applied to the channel mean.
    pub self_v: Tensor,
    /// [d] score pooling vector.
    pub self_w: Tensor,
    pub uni: UnitaryParams,
}

impl CoAttentionParams {
    pub fn init(n: usize, m: usize, d: usize, glimpses: usize, rng: &mut impl Rng) -> Self {
        let bn = (6.0 / n as f64).sqrt();
        let bd = (6.0 / d as f64).sqrt();
        CoAttentionParams {
            self_u: Tensor::uniform(&[d, n], -bn, bn, rng),
            self_v: Tensor::uniform(&[d, n], -bn, bn, rng),
            self_w: Tensor::uniform(&[d], -bd, bd, rng),
            uni: UnitaryParams::init(n, m, d, glimpses, rng),
        }
    }
}

/// Result of co-attention: the compressed question vector, the attended
/// visual vector(s), and both attention distributions.
#[derive(Clone, Debug)]
pub struct CoOutcome {
    pub question: Tensor,
    pub attended: Tensor,
    pub alpha_question: Tensor,
    pub visual: UnitaryOutcome,
}

/// Two-step co-attention: self-attention compresses the question channels
/// into one vector, then unitary attention conditions on it. The modalities
/// never interact pairwise.
pub fn co_attention(
    tape: &mut Tape,
    x: &Tensor,
    y: &Tensor,
    params: &CoAttentionParams,
    mask: &ChannelMask,
    form: Form,
) -> Result<CoOutcome> {
    let rho = x.dim(1)?;
    // Score each question channel against the channel mean.
    let sums = tape.reduce_sum(x, 1)?;
    let xbar = tape.scale(&sums, 1.0 / rho as f64);
    let su = tape.matmul(&params.self_u, x)?;
    let su = form.apply(tape, &su);
    let sv = tape.matvec(&params.self_v, &xbar)?;
    let sv = form.apply(tape, &sv);
    let svb = tape.outer_broadcast(&sv, rho)?;
    let joint = tape.hadamard(&su, &svb)?;
    let d = params.self_w.dim(0)?;
    let w_row = tape.reshape(&params.self_w, &[1, d])?;
    let scores = tape.matmul(&w_row, &joint)?;
    let scores = tape.reshape(&scores, &[rho])?;
    let alpha_x = tape.masked_softmax(&scores, None, NormScope::Joint)?;
    let xhat = tape.matvec(x, &alpha_x)?;

    let visual = unitary_attention(tape, &xhat, y, &params.uni, mask, form)?;
    Ok(CoOutcome {
        question: xhat,
        attended: visual.attended.clone(),
        alpha_question: alpha_x,
        visual,
    })
}

/// Write one glimpse's rho x phi probability grid as CSV: one row per
/// question channel, one column per visual channel.
pub fn write_map_grid_csv(probs: &Tensor, out: &mut impl Write) -> std::io::Result<()> {
    let (rho, phi) = (probs.shape()[0], probs.shape()[1]);
    write!(out, "question_channel")?;
    for j in 0..phi {
        write!(out, ",v{j}")?;
    }
    writeln!(out)?;
    for i in 0..rho {
        write!(out, "q{i}")?;
        for j in 0..phi {
            write!(out, ",{}", probs.at2(i, j))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Column sums over question channels, ranking visual channels by marginal
/// attention mass, written in descending order.
pub fn write_map_marginals_csv(probs: &Tensor, out: &mut impl Write) -> std::io::Result<()> {
    let marginals = map_marginals(probs);
    let mut order: Vec<usize> = (0..marginals.len()).collect();
    order.sort_by(|&a, &b| {
        marginals[b]
            .partial_cmp(&marginals[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    writeln!(out, "rank,visual_channel,marginal")?;
    for (rank, &j) in order.iter().enumerate() {
        writeln!(out, "{},v{},{}", rank + 1, j, marginals[j])?;
    }
    Ok(())
}

/// Marginal over question channels: column sums of the joint map.
pub fn map_marginals(probs: &Tensor) -> Vec<f64> {
    let (rho, phi) = (probs.shape()[0], probs.shape()[1]);
    (0..phi)
        .map(|j| (0..rho).map(|i| probs.at2(i, j)).sum())
        .collect()
}
