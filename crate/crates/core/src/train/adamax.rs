//! Adamax: the infinity-norm variant of Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter first moments and infinity-norm accumulators.
#[derive(Clone, Debug)]
pub struct AdamaxState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<Tensor>,
    inf_norm: Vec<Tensor>,
}

impl AdamaxState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let mut first = Vec::new();
        let mut inf = Vec::new();
        for p in params {
            first.push(Tensor::zeros(p.shape()));
            inf.push(Tensor::zeros(p.shape()));
        }
        AdamaxState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: first,
            inf_norm: inf,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// The accumulated infinity norms; nonnegative and per-coordinate
    /// non-decreasing while beta2 u stays below |g|.
    pub fn inf_norms(&self) -> &[Tensor] {
        &self.inf_norm
    }
}

/// One optimizer step:
/// m <- b1 m + (1 - b1) g, u <- max(b2 u, |g|),
/// theta <- theta - (lr / (1 - b1^t)) m / max(u, eps).
///
/// The epsilon guards the division only; it stays out of the denominator sum
/// so the first-step displacement is exactly -lr for a unit gradient.
pub fn adamax_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    state: &mut AdamaxState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "adamax_step",
            message: format!("learning rate must be positive, got {lr}"),
        });
    }
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::InvalidArgument {
            op: "adamax_step",
            message: format!(
                "parameter/gradient/state counts disagree: {} / {} / {}",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        });
    }
    state.step += 1;
    let bias = 1.0 - state.beta1.powi(state.step as i32);
    let rate = lr / bias;
    for (i, ((name, param), grad)) in params.iter_mut().zip(grads).enumerate() {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamax_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let m = state.first_moment[i].data_mut();
        let u = state.inf_norm[i].data_mut();
        let theta = param.data_mut();
        for j in 0..grad.numel() {
            let g = grad.data()[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            u[j] = (state.beta2 * u[j]).max(g.abs());
            theta[j] -= rate * m[j] / u[j].max(state.epsilon);
        }
        let _ = name;
    }
    Ok(())
}
