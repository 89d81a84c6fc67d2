//! Wengert tape: reverse-mode AD via operation recording.
//!
//! Every operation validates shapes, computes its value through the shared
//! kernels, and (when the tape is recording) appends one node holding the
//! saved values its gradient rule needs. `backward` walks the node list in
//! reverse, which is a reverse topological order because parents always
//! precede children on an append-only tape.

use super::kernels;
use super::{NormScope, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

// ── Gradient rules ───────────────────────────────────────────────────

/// Saved state for one recorded operation, enough to run its vector-Jacobian
/// product without recomputing the forward pass.
enum Rule {
    Leaf,
    Matmul {
        a: Vec<f64>,
        b: Vec<f64>,
        r: usize,
        s: usize,
        t: usize,
    },
    Hadamard {
        a: Vec<f64>,
        b: Vec<f64>,
    },
    Add,
    Sub,
    Scale {
        factor: f64,
    },
    Relu {
        input: Vec<f64>,
    },
    Sigmoid {
        output: Vec<f64>,
    },
    Tanh {
        output: Vec<f64>,
    },
    MaskedSoftmax {
        output: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    ReduceSum {
        rows: usize,
        cols: usize,
        axis: usize,
    },
    SumAll {
        numel: usize,
    },
    OuterBroadcast {
        k: usize,
        n: usize,
    },
    Transpose {
        rows: usize,
        cols: usize,
    },
    Reshape,
    Row {
        index: usize,
        rows: usize,
        cols: usize,
    },
    Col {
        index: usize,
        rows: usize,
        cols: usize,
    },
    StackCols {
        len: usize,
        count: usize,
    },
    ConcatVec {
        lens: Vec<usize>,
    },
    SumPool {
        window: usize,
    },
    WeightNorm {
        v: Vec<f64>,
        g: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    BceWithLogits {
        logits: Vec<f64>,
        targets: Vec<f64>,
    },
    BceOnProbs {
        probs: Vec<f64>,
        targets: Vec<f64>,
        valid: Option<Vec<bool>>,
        floor: f64,
    },
}

struct Node {
    shape: Vec<usize>,
    parents: Vec<Option<NodeId>>,
    rule: Rule,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tracked tensor. Tracked leaves
    /// the loss never touched get a zero tensor of the right shape.
    pub fn of(&self, t: &Tensor) -> Result<Tensor> {
        let id = t.node().ok_or(Error::InvalidArgument {
            op: "Gradients::of",
            message: "tensor is not tracked on this tape".into(),
        })?;
        Ok(match self.grads.get(id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        })
    }

    pub fn by_node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

// ── The tape ─────────────────────────────────────────────────────────

/// Reverse-mode differentiation record. One tape owns one forward/backward
/// pass; parallelism belongs across independent tapes, never inside one.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    relu_min_margin: f64,
    relu_pos_counts: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Recording tape: operations append gradient rules.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            relu_min_margin: f64::INFINITY,
            relu_pos_counts: Vec::new(),
        }
    }

    /// Inference tape: operations compute values only. Outputs are untracked
    /// and `backward` is unavailable.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest |pre-activation| seen by any relu on this tape. Used by the
    /// gradient checker to exclude coordinates near a kink.
    pub fn relu_min_margin(&self) -> f64 {
        self.relu_min_margin
    }

    /// Positive-entry count per relu call, in call order. Two evaluations of
    /// the same graph whose counts differ straddled at least one kink.
    pub fn relu_pos_counts(&self) -> &[usize] {
        &self.relu_pos_counts
    }

    fn push(&mut self, shape: &[usize], parents: Vec<Option<NodeId>>, rule: impl FnOnce() -> Rule) -> Option<NodeId> {
        let is_leaf = parents.is_empty();
        if !self.recording || (!is_leaf && parents.iter().all(Option::is_none)) {
            return None;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape: shape.to_vec(),
            parents,
            rule: rule(),
        });
        Some(id)
    }

    /// Register a tensor as a tracked leaf. The returned copy participates in
    /// gradient flow; the original stays untracked.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let node = self.push(t.shape(), Vec::new(), || Rule::Leaf);
        Tensor::tracked(t.shape().to_vec(), t.data().to_vec(), node)
    }

    // ── Primitive operations ─────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (r, s) = (a.dim(0)?, a.dim(1)?);
        let (s2, t) = (b.dim(0)?, b.dim(1)?);
        if s != s2 || a.rank() != 2 || b.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = kernels::matmul(a.data(), b.data(), r, s, t);
        let node = self.push(&[r, t], vec![a.node(), b.node()], || Rule::Matmul {
            a: a.data().to_vec(),
            b: b.data().to_vec(),
            r,
            s,
            t,
        });
        Ok(Tensor::tracked(vec![r, t], data, node))
    }

    /// Matrix times vector, treating `v` as a single column.
    pub fn matvec(&mut self, m: &Tensor, v: &Tensor) -> Result<Tensor> {
        let n = v.dim(0)?;
        let col = self.reshape(v, &[n, 1])?;
        let out = self.matmul(m, &col)?;
        let rows = out.dim(0)?;
        self.reshape(&out, &[rows])
    }

    pub fn hadamard(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "hadamard",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = kernels::hadamard(a.data(), b.data());
        let node = self.push(a.shape(), vec![a.node(), b.node()], || Rule::Hadamard {
            a: a.data().to_vec(),
            b: b.data().to_vec(),
        });
        Ok(Tensor::tracked(a.shape().to_vec(), data, node))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = kernels::add(a.data(), b.data());
        let node = self.push(a.shape(), vec![a.node(), b.node()], || Rule::Add);
        Ok(Tensor::tracked(a.shape().to_vec(), data, node))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = kernels::sub(a.data(), b.data());
        let node = self.push(a.shape(), vec![a.node(), b.node()], || Rule::Sub);
        Ok(Tensor::tracked(a.shape().to_vec(), data, node))
    }

    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Tensor {
        let data = kernels::scale(a.data(), factor);
        let node = self.push(a.shape(), vec![a.node()], || Rule::Scale { factor });
        Tensor::tracked(a.shape().to_vec(), data, node)
    }

    /// Element-wise max(x, 0). The subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let mut margin = f64::INFINITY;
        let mut positive = 0usize;
        for &x in a.data() {
            margin = margin.min(x.abs());
            if x > 0.0 {
                positive += 1;
            }
        }
        self.relu_min_margin = self.relu_min_margin.min(margin);
        self.relu_pos_counts.push(positive);
        let data = kernels::relu(a.data());
        let node = self.push(a.shape(), vec![a.node()], || Rule::Relu {
            input: a.data().to_vec(),
        });
        Tensor::tracked(a.shape().to_vec(), data, node)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        let data = kernels::sigmoid(a.data());
        let node = self.push(a.shape(), vec![a.node()], || Rule::Sigmoid {
            output: data.clone(),
        });
        Tensor::tracked(a.shape().to_vec(), data, node)
    }

    pub fn tanh(&mut self, a: &Tensor) -> Tensor {
        let data = kernels::tanh(a.data());
        let node = self.push(a.shape(), vec![a.node()], || Rule::Tanh {
            output: data.clone(),
        });
        Tensor::tracked(a.shape().to_vec(), data, node)
    }

    /// Numerically stable softmax with optional masking.
    ///
    /// `keep[i] == false` forces output `i` to exactly zero and blocks its
    /// gradient. Each normalization group (the whole tensor under
    /// [`NormScope::Joint`], each row under [`NormScope::Rows`]) must retain
    /// at least one unmasked entry with a finite logit.
    pub fn masked_softmax(
        &mut self,
        logits: &Tensor,
        keep: Option<&[bool]>,
        scope: NormScope,
    ) -> Result<Tensor> {
        if let Some(k) = keep {
            if k.len() != logits.numel() {
                return Err(Error::InvalidArgument {
                    op: "masked_softmax",
                    message: format!(
                        "mask has {} entries for a tensor of {}",
                        k.len(),
                        logits.numel()
                    ),
                });
            }
        }
        let (rows, cols) = match scope {
            NormScope::Joint => (1, logits.numel()),
            NormScope::Rows => {
                if logits.rank() != 2 {
                    return Err(Error::InvalidArgument {
                        op: "masked_softmax",
                        message: format!("row scope needs rank 2, got shape {:?}", logits.shape()),
                    });
                }
                (logits.dim(0)?, logits.dim(1)?)
            }
        };
        let mut data = vec![0.0; logits.numel()];
        for row in 0..rows {
            let idx = row * cols..(row + 1) * cols;
            kernels::softmax_group(logits.data(), keep, idx, &mut data)
                .ok_or(Error::EmptyAttentionGroup)?;
        }
        let node = self.push(logits.shape(), vec![logits.node()], || Rule::MaskedSoftmax {
            output: data.clone(),
            rows,
            cols,
        });
        Ok(Tensor::tracked(logits.shape().to_vec(), data, node))
    }

    /// Collapse one axis of a rank-2 tensor. Axis 0 leaves per-column totals,
    /// axis 1 per-row totals.
    pub fn reduce_sum(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if a.rank() != 2 || axis > 1 {
            return Err(Error::InvalidAxis {
                axis,
                rank: a.rank(),
            });
        }
        let (rows, cols) = (a.dim(0)?, a.dim(1)?);
        let data = kernels::reduce_sum_2d(a.data(), rows, cols, axis);
        let out_shape = vec![if axis == 0 { cols } else { rows }];
        let node = self.push(&out_shape, vec![a.node()], || Rule::ReduceSum { rows, cols, axis });
        Ok(Tensor::tracked(out_shape, data, node))
    }

    /// Total over every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, a: &Tensor) -> Tensor {
        let total: f64 = a.data().iter().sum();
        let node = self.push(&[], vec![a.node()], || Rule::SumAll { numel: a.numel() });
        Tensor::tracked(vec![], vec![total], node)
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Tensor {
        let total = self.sum_all(a);
        self.scale(&total, 1.0 / a.numel() as f64)
    }

    /// Replicate a vector as `n` identical columns: out[k][j] = v[k].
    pub fn outer_broadcast(&mut self, v: &Tensor, n: usize) -> Result<Tensor> {
        if v.rank() != 1 {
            return Err(Error::InvalidArgument {
                op: "outer_broadcast",
                message: format!("expected a vector, got shape {:?}", v.shape()),
            });
        }
        if n == 0 {
            return Err(Error::InvalidArgument {
                op: "outer_broadcast",
                message: "replication count must be at least 1".into(),
            });
        }
        let k = v.dim(0)?;
        let data = kernels::outer_broadcast(v.data(), n);
        let node = self.push(&[k, n], vec![v.node()], || Rule::OuterBroadcast { k, n });
        Ok(Tensor::tracked(vec![k, n], data, node))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = (a.dim(0)?, a.dim(1)?);
        let data = kernels::transpose(a.data(), rows, cols);
        let node = self.push(&[cols, rows], vec![a.node()], || Rule::Transpose { rows, cols });
        Ok(Tensor::tracked(vec![cols, rows], data, node))
    }

    pub fn reshape(&mut self, a: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != a.numel() {
            return Err(Error::InvalidArgument {
                op: "reshape",
                message: format!("cannot view {:?} as {:?}", a.shape(), new_shape),
            });
        }
        let node = self.push(new_shape, vec![a.node()], || Rule::Reshape);
        Ok(Tensor::tracked(
            new_shape.to_vec(),
            a.data().to_vec(),
            node,
        ))
    }

    /// Row `i` of a rank-2 tensor as a vector.
    pub fn row(&mut self, a: &Tensor, index: usize) -> Result<Tensor> {
        let (rows, cols) = (a.dim(0)?, a.dim(1)?);
        if index >= rows {
            return Err(Error::InvalidArgument {
                op: "row",
                message: format!("row {index} out of {rows}"),
            });
        }
        let data = a.data()[index * cols..(index + 1) * cols].to_vec();
        let node = self.push(&[cols], vec![a.node()], || Rule::Row { index, rows, cols });
        Ok(Tensor::tracked(vec![cols], data, node))
    }

    /// Column `j` of a rank-2 tensor as a vector.
    pub fn col(&mut self, a: &Tensor, index: usize) -> Result<Tensor> {
        let (rows, cols) = (a.dim(0)?, a.dim(1)?);
        if index >= cols {
            return Err(Error::InvalidArgument {
                op: "col",
                message: format!("column {index} out of {cols}"),
            });
        }
        let data = (0..rows).map(|r| a.data()[r * cols + index]).collect();
        let node = self.push(&[rows], vec![a.node()], || Rule::Col { index, rows, cols });
        Ok(Tensor::tracked(vec![rows], data, node))
    }

    /// Stack equal-length vectors as the columns of a matrix.
    pub fn stack_cols(&mut self, vs: &[Tensor]) -> Result<Tensor> {
        if vs.is_empty() {
            return Err(Error::InvalidArgument {
                op: "stack_cols",
                message: "no columns given".into(),
            });
        }
        let len = vs[0].dim(0)?;
        for v in vs {
            if v.rank() != 1 || v.dim(0)? != len {
                return Err(Error::ShapeMismatch {
                    op: "stack_cols",
                    lhs: vs[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let count = vs.len();
        let mut data = vec![0.0; len * count];
        for (i, v) in vs.iter().enumerate() {
            for (k, &x) in v.data().iter().enumerate() {
                data[k * count + i] = x;
            }
        }
        let parents = vs.iter().map(|v| v.node()).collect();
        let node = self.push(&[len, count], parents, || Rule::StackCols { len, count });
        Ok(Tensor::tracked(vec![len, count], data, node))
    }

    /// Concatenate vectors end to end.
    pub fn concat_vec(&mut self, vs: &[Tensor]) -> Result<Tensor> {
        if vs.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat_vec",
                message: "no vectors given".into(),
            });
        }
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(vs.len());
        for v in vs {
            if v.rank() != 1 {
                return Err(Error::InvalidArgument {
                    op: "concat_vec",
                    message: format!("expected vectors, got shape {:?}", v.shape()),
                });
            }
            lens.push(v.numel());
            data.extend_from_slice(v.data());
        }
        let total = data.len();
        let parents = vs.iter().map(|v| v.node()).collect();
        let node = self.push(&[total], parents, || Rule::ConcatVec { lens });
        Ok(Tensor::tracked(vec![total], data, node))
    }

    /// Non-overlapping window sums over a vector; the MFB pooling primitive.
    pub fn sum_pool(&mut self, a: &Tensor, window: usize) -> Result<Tensor> {
        let len = a.dim(0)?;
        if window == 0 || len % window != 0 {
            return Err(Error::InvalidArgument {
                op: "sum_pool",
                message: format!("length {len} not divisible by window {window}"),
            });
        }
        let data = kernels::sum_pool(a.data(), window);
        let out = len / window;
        let node = self.push(&[out], vec![a.node()], || Rule::SumPool { window });
        Ok(Tensor::tracked(vec![out], data, node))
    }

    /// Weight normalization: each row i of the effective weight is
    /// g[i] * v[i] / ||v[i]||. Gradients flow to both the direction `v`
    /// and the gain `g`.
    pub fn weight_norm(&mut self, v: &Tensor, g: &Tensor) -> Result<Tensor> {
        let (rows, cols) = (v.dim(0)?, v.dim(1)?);
        if g.rank() != 1 || g.dim(0)? != rows {
            return Err(Error::ShapeMismatch {
                op: "weight_norm",
                lhs: v.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &v.data()[i * cols..(i + 1) * cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::InvalidArgument {
                    op: "weight_norm",
                    message: format!("direction row {i} has zero norm"),
                });
            }
            let s = g.data()[i] / norm;
            for (o, &x) in data[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                *o = s * x;
            }
        }
        let node = self.push(&[rows, cols], vec![v.node(), g.node()], || Rule::WeightNorm {
            v: v.data().to_vec(),
            g: g.data().to_vec(),
            rows,
            cols,
        });
        Ok(Tensor::tracked(vec![rows, cols], data, node))
    }

    /// Mean binary cross entropy over logits, in the stable logit form.
    /// Targets are plain data; gradient flows to the logits only.
    pub fn bce_with_logits(&mut self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        if logits.shape() != targets.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: logits.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let n = logits.numel() as f64;
        let total: f64 = logits
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| kernels::bce_logit_term(z, t))
            .sum();
        let node = self.push(&[], vec![logits.node()], || Rule::BceWithLogits {
            logits: logits.data().to_vec(),
            targets: targets.data().to_vec(),
        });
        Ok(Tensor::tracked(vec![], vec![total / n], node))
    }

    /// Mean binary cross entropy taking probabilities directly, clamped to
    /// `[floor, 1 - floor]`. Cells where `valid` is false are skipped.
    pub fn bce_on_probs(
        &mut self,
        probs: &Tensor,
        targets: &Tensor,
        valid: Option<&[bool]>,
        floor: f64,
    ) -> Result<Tensor> {
        if probs.shape() != targets.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_on_probs",
                lhs: probs.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        if let Some(v) = valid {
            if v.len() != probs.numel() {
                return Err(Error::InvalidArgument {
                    op: "bce_on_probs",
                    message: "validity mask length mismatch".into(),
                });
            }
        }
        let n_valid = valid.map_or(probs.numel(), |v| v.iter().filter(|&&b| b).count());
        if n_valid == 0 {
            return Err(Error::InvalidArgument {
                op: "bce_on_probs",
                message: "no valid cells".into(),
            });
        }
        let mut total = 0.0;
        for (i, (&p, &t)) in probs.data().iter().zip(targets.data()).enumerate() {
            if valid.map_or(true, |v| v[i]) {
                let p = p.clamp(floor, 1.0 - floor);
                total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            }
        }
        let node = self.push(&[], vec![probs.node()], || Rule::BceOnProbs {
            probs: probs.data().to_vec(),
            targets: targets.data().to_vec(),
            valid: valid.map(|v| v.to_vec()),
            floor,
        });
        Ok(Tensor::tracked(vec![], vec![total / n_valid as f64], node))
    }

    // ── Backward pass ────────────────────────────────────────────────

    /// Reverse sweep from a tracked scalar loss. Visits each node exactly
    /// once in reverse topological order and accumulates gradients for every
    /// tracked ancestor; tracked leaves the loss never reached read back as
    /// zeros through [`Gradients::of`].
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let loss_id = loss.node().ok_or(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        })?;
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            let wants: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward_rule(&node.rule, &g, &wants);
            for (slot, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (slot, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&pg) {
                                *a += b;
                            }
                        }
                        free => *free = Some(pg),
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| Tensor::tracked(self.nodes[id].shape.clone(), data, Some(id)))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Vector-Jacobian product of one rule. Returns one gradient per parent
/// slot; slots whose parent is untracked (`wants[i] == false`) are skipped.
fn backward_rule(rule: &Rule, g: &[f64], wants: &[bool]) -> Vec<Option<Vec<f64>>> {
    match rule {
        Rule::Leaf => Vec::new(),
        Rule::Matmul { a, b, r, s, t } => {
            let da = wants[0].then(|| {
                // dA = G * B^T
                let bt = kernels::transpose(b, *s, *t);
                kernels::matmul(g, &bt, *r, *t, *s)
            });
            let db = wants[1].then(|| {
                // dB = A^T * G
                let at = kernels::transpose(a, *r, *s);
                kernels::matmul(&at, g, *s, *r, *t)
            });
            vec![da, db]
        }
        Rule::Hadamard { a, b } => vec![
            wants[0].then(|| kernels::hadamard(g, b)),
            wants[1].then(|| kernels::hadamard(g, a)),
        ],
        Rule::Add => vec![
            wants[0].then(|| g.to_vec()),
            wants[1].then(|| g.to_vec()),
        ],
        Rule::Sub => vec![
            wants[0].then(|| g.to_vec()),
            wants[1].then(|| kernels::scale(g, -1.0)),
        ],
        Rule::Scale { factor } => vec![wants[0].then(|| kernels::scale(g, *factor))],
        Rule::Relu { input } => vec![wants[0].then(|| {
            g.iter()
                .zip(input)
                .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                .collect()
        })],
        Rule::Sigmoid { output } => vec![wants[0].then(|| {
            g.iter()
                .zip(output)
                .map(|(&gi, &y)| gi * y * (1.0 - y))
                .collect()
        })],
        Rule::Tanh { output } => vec![wants[0].then(|| {
            g.iter()
                .zip(output)
                .map(|(&gi, &y)| gi * (1.0 - y * y))
                .collect()
        })],
        Rule::MaskedSoftmax {
            output,
            rows,
            cols,
            ..
        } => vec![wants[0].then(|| {
            // dz_i = y_i * (g_i - sum_j g_j y_j) per group; masked cells have
            // y_i = 0 so their gradient vanishes automatically.
            let mut dz = vec![0.0; output.len()];
            for row in 0..*rows {
                let span = row * cols..(row + 1) * cols;
                let dot: f64 = span
                    .clone()
                    .map(|i| g[i] * output[i])
                    .sum();
                for i in span {
                    dz[i] = output[i] * (g[i] - dot);
                }
            }
            dz
        })],
        Rule::ReduceSum { rows, cols, axis } => vec![wants[0].then(|| {
            let mut dz = vec![0.0; rows * cols];
            for i in 0..*rows {
                for j in 0..*cols {
                    dz[i * cols + j] = if *axis == 0 { g[j] } else { g[i] };
                }
            }
            dz
        })],
        Rule::SumAll { numel } => vec![wants[0].then(|| vec![g[0]; *numel])],
        Rule::OuterBroadcast { k, n } => vec![wants[0].then(|| {
            (0..*k)
                .map(|i| g[i * n..(i + 1) * n].iter().sum())
                .collect()
        })],
        Rule::Transpose { rows, cols } => {
            // g has the transposed layout [cols x rows]
            vec![wants[0].then(|| kernels::transpose(g, *cols, *rows))]
        }
        Rule::Reshape => vec![wants[0].then(|| g.to_vec())],
        Rule::Row { index, rows, cols } => vec![wants[0].then(|| {
            let mut dz = vec![0.0; rows * cols];
            dz[index * cols..(index + 1) * cols].copy_from_slice(g);
            dz
        })],
        Rule::Col { index, rows, cols } => vec![wants[0].then(|| {
            let mut dz = vec![0.0; rows * cols];
            for r in 0..*rows {
                dz[r * cols + index] = g[r];
            }
            dz
        })],
        Rule::StackCols { len, count } => (0..*count)
            .map(|i| wants[i].then(|| (0..*len).map(|k| g[k * count + i]).collect()))
            .collect(),
        Rule::ConcatVec { lens } => {
            let mut offset = 0;
            lens.iter()
                .enumerate()
                .map(|(i, &l)| {
                    let piece = wants[i].then(|| g[offset..offset + l].to_vec());
                    offset += l;
                    piece
                })
                .collect()
        }
        Rule::SumPool { window } => vec![wants[0].then(|| {
            let mut dz = Vec::with_capacity(g.len() * window);
            for &gi in g {
                dz.extend(std::iter::repeat(gi).take(*window));
            }
            dz
        })],
        Rule::WeightNorm { v, g: gain, rows, cols } => {
            let mut dv = wants[0].then(|| vec![0.0; rows * cols]);
            let mut dg = wants[1].then(|| vec![0.0; *rows]);
            for i in 0..*rows {
                let row = &v[i * cols..(i + 1) * cols];
                let grow = &g[i * cols..(i + 1) * cols];
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = grow.iter().zip(row).map(|(a, b)| a * b).sum();
                if let Some(dg) = dg.as_mut() {
                    dg[i] = dot / norm;
                }
                if let Some(dv) = dv.as_mut() {
                    let s = gain[i] / norm;
                    let c = gain[i] * dot / (norm * norm * norm);
                    for (k, slot) in dv[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                        *slot = s * grow[k] - c * row[k];
                    }
                }
            }
            vec![dv, dg]
        }
        Rule::BceWithLogits { logits, targets } => vec![wants[0].then(|| {
            let n = logits.len() as f64;
            logits
                .iter()
                .zip(targets)
                .map(|(&z, &t)| g[0] * (kernels::sigmoid_scalar(z) - t) / n)
                .collect()
        })],
        Rule::BceOnProbs {
            probs,
            targets,
            valid,
            floor,
        } => vec![wants[0].then(|| {
            let n = valid
                .as_ref()
                .map_or(probs.len(), |v| v.iter().filter(|&&b| b).count())
                as f64;
            probs
                .iter()
                .zip(targets)
                .enumerate()
                .map(|(i, (&p, &t))| {
                    let in_range = p > *floor && p < 1.0 - *floor;
                    let is_valid = valid.as_ref().map_or(true, |v| v[i]);
                    if in_range && is_valid {
                        g[0] * (-t / p + (1.0 - t) / (1.0 - p)) / n
                    } else {
                        0.0
                    }
                })
                .collect()
        })],
    }
}
