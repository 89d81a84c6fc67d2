//! Single-layer unidirectional GRU question encoder.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use rand::Rng;

/// Gate parameters. Input maps are [N x E], recurrent maps [N x N],
/// biases [N].
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn init(hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        let mut w = |i: usize| {
            let b = (6.0 / (hidden + i) as f64).sqrt();
            Tensor::uniform(&[hidden, i], -b, b, rng)
        };
        GruParams {
            w_r: w(input),
            u_r: w(hidden),
            b_r: Tensor::zeros(&[hidden]),
            w_z: w(input),
            u_z: w(hidden),
            b_z: Tensor::zeros(&[hidden]),
            w_h: w(input),
            u_h: w(hidden),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.b_r.shape()[0]
    }
}

/// Run the GRU recurrence from a zero initial state over the columns of
/// `embeddings` [E x T], returning every hidden state as the columns of a
/// [N x T] matrix. The recurrence is the original gating:
/// h_t = (1 - z_t) o h_{t-1} + z_t o tanh(W_h x_t + U_h (r_t o h_{t-1}) + b_h).
pub fn gru_encode(tape: &mut Tape, embeddings: &Tensor, params: &GruParams) -> Result<Tensor> {
    let steps = embeddings.dim(1)?;
    if steps == 0 {
        return Err(Error::InvalidArgument {
            op: "gru_encode",
            message: "empty token sequence".into(),
        });
    }
    let hidden = params.hidden_size();
    let ones = Tensor::ones(&[hidden]);
    let mut h = Tensor::zeros(&[hidden]);
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = tape.col(embeddings, t)?;
        let r = gate(tape, &params.w_r, &x, &params.u_r, &h, &params.b_r)?;
        let r = tape.sigmoid(&r);
        let z = gate(tape, &params.w_z, &x, &params.u_z, &h, &params.b_z)?;
        let z = tape.sigmoid(&z);
        let rh = tape.hadamard(&r, &h)?;
        let cand = gate(tape, &params.w_h, &x, &params.u_h, &rh, &params.b_h)?;
        let cand = tape.tanh(&cand);
        let keep = tape.sub(&ones, &z)?;
        let kept = tape.hadamard(&keep, &h)?;
        let new = tape.hadamard(&z, &cand)?;
        h = tape.add(&kept, &new)?;
        states.push(h.clone());
    }
    tape.stack_cols(&states)
}

fn gate(
    tape: &mut Tape,
    w: &Tensor,
    x: &Tensor,
    u: &Tensor,
    h: &Tensor,
    b: &Tensor,
) -> Result<Tensor> {
    let wx = tape.matvec(w, x)?;
    let uh = tape.matvec(u, h)?;
    let s = tape.add(&wx, &uh)?;
    tape.add(&s, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_states() {
        let params = GruParams {
            w_r: Tensor::zeros(&[3, 2]),
            u_r: Tensor::zeros(&[3, 3]),
            b_r: Tensor::zeros(&[3]),
            w_z: Tensor::zeros(&[3, 2]),
            u_z: Tensor::zeros(&[3, 3]),
            b_z: Tensor::zeros(&[3]),
            w_h: Tensor::zeros(&[3, 2]),
            u_h: Tensor::zeros(&[3, 3]),
            b_h: Tensor::zeros(&[3]),
        };
        let mut tape = Tape::inference();
        let x = Tensor::zeros(&[2, 4]);
        let states = gru_encode(&mut tape, &x, &params).unwrap();
        assert_eq!(states.shape(), &[3, 4]);
        assert!(states.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_formula() {
        // From a zero initial state: r and z reduce to sigmoid(Wx + b),
        // the candidate to tanh(W_h x + b_h), and h_1 = z o candidate.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = GruParams::init(3, 2, &mut rng);
        let x = Tensor::uniform(&[2, 1], -1.0, 1.0, &mut rng);
        let mut tape = Tape::inference();
        let states = gru_encode(&mut tape, &x, &params).unwrap();
        for i in 0..3 {
            let wz_x: f64 = (0..2).map(|e| params.w_z.data()[i * 2 + e] * x.data()[e]).sum();
            let z = 1.0 / (1.0 + (-wz_x).exp());
            let wh_x: f64 = (0..2).map(|e| params.w_h.data()[i * 2 + e] * x.data()[e]).sum();
            let cand = wh_x.tanh();
            assert!((states.data()[i] - z * cand).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_empty_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = GruParams::init(3, 2, &mut rng);
        let mut tape = Tape::inference();
        let x = Tensor::zeros(&[2, 0]);
        assert!(gru_encode(&mut tape, &x, &params).is_err());
    }

    #[test]
    fn three_step_gradients_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = GruParams::init(3, 2, &mut rng);
        let inputs = vec![
            Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng),
            p.w_r, p.u_r, p.b_r, p.w_z, p.u_z, p.b_z, p.w_h, p.u_h, p.b_h,
        ];
        let f = |tape: &mut Tape, xs: &[Tensor]| {
            let params = GruParams {
                w_r: xs[1].clone(),
                u_r: xs[2].clone(),
                b_r: xs[3].clone(),
                w_z: xs[4].clone(),
                u_z: xs[5].clone(),
                b_z: xs[6].clone(),
                w_h: xs[7].clone(),
                u_h: xs[8].clone(),
                b_h: xs[9].clone(),
            };
            let states = gru_encode(tape, &xs[0], &params)?;
            Ok(tape.sum_all(&states))
        };
        let opts = GradCheckOptions {
            tolerance: 1e-4,
            ..GradCheckOptions::default()
        };
        let report = grad_check(f, &inputs, &opts).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }
}
