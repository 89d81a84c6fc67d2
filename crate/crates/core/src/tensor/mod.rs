//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a row-major flat buffer plus shape metadata. Gradient
//! tracking is opt-in: operations go through a [`Tape`], which records one
//! node per produced tensor and replays the records in reverse to accumulate
//! gradients. Tensors are immutable once built; a tape is single threaded
//! and owns exactly one forward/backward pass.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, InputCheck};
pub use tape::{Gradients, NodeId, Tape};

use crate::error::{Error, Result};
use rand::Rng;

/// Normalization scope for [`Tape::masked_softmax`].
///
/// `Joint` treats the whole tensor as one normalization group. `Rows`
/// normalizes each row of a rank-2 tensor independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormScope {
    Joint,
    Rows,
}

/// Dense multi-dimensional array of f64 values in row-major order.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument {
                op: "Tensor::from_vec",
                message: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }

    /// Rank-2 tensor from row slices. Test and fixture ergonomics.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument {
                op: "Tensor::from_rows",
                message: "ragged rows".into(),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::from_vec(vec![r, c], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
            node: None,
        }
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidArgument {
                op: "Tensor::item",
                message: format!("expected scalar, got shape {:?}", self.shape),
            })
        }
    }

    /// Dimension `i`, or an axis error.
    pub fn dim(&self, i: usize) -> Result<usize> {
        self.shape.get(i).copied().ok_or(Error::InvalidAxis {
            axis: i,
            rank: self.rank(),
        })
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Copy without the tape handle. Gradient flow stops here.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub(crate) fn tracked(shape: Vec<usize>, data: Vec<f64>, node: Option<NodeId>) -> Self {
        Tensor { shape, data, node }
    }

    pub fn approx_eq(&self, other: &Tensor, tol: f64) -> bool {
        self.shape == other.shape && max_abs_diff(self, other) <= tol
    }
}

/// Largest absolute elementwise difference. Panics on shape mismatch.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff: shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest relative elementwise difference, with the denominator floored at 1
/// so near-zero entries are compared absolutely.
pub fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_diff: shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
