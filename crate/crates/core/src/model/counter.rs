//! Counting-module interface.
//!
//! The counting module itself is external work; only its interface lives
//! here: a callable taking box geometry [4 x k] and per-object attention
//! logits [k] to a count representation in R^{k+1}. Two plugins ship: a zero
//! stub (the default) and a count-by-threshold demo.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait CounterPlugin: Send + Sync {
    /// Map selected box geometry and attention logits to a count vector of
    /// length k + 1, where k is the number of boxes passed in.
    fn count(&self, boxes: &Tensor, attention_logits: &Tensor) -> Tensor;

    fn name(&self) -> &'static str;
}

/// Always returns zeros. With a zero-bias embedding this makes the counter
/// hook an exact no-op, which the tests pin down.
pub struct ZeroCounter;

impl CounterPlugin for ZeroCounter {
    fn count(&self, _boxes: &Tensor, attention_logits: &Tensor) -> Tensor {
        Tensor::zeros(&[attention_logits.numel() + 1])
    }

    fn name(&self) -> &'static str {
        "zero-stub"
    }
}

/// Demo plugin: a one-hot over 0..=k at the number of objects whose
/// sigmoid-squashed logit clears the threshold.
pub struct ThresholdCounter {
    pub threshold: f64,
}

impl CounterPlugin for ThresholdCounter {
    fn count(&self, _boxes: &Tensor, attention_logits: &Tensor) -> Tensor {
        let k = attention_logits.numel();
        let hits = attention_logits
            .data()
            .iter()
            .filter(|&&z| 1.0 / (1.0 + (-z).exp()) > self.threshold)
            .count();
        let mut data = vec![0.0; k + 1];
        data[hits.min(k)] = 1.0;
        Tensor::vector(data)
    }

    fn name(&self) -> &'static str {
        "count-by-threshold"
    }
}

/// Per-column maxima of a logit grid: the attention summary the counting
/// module consumes.
pub fn column_max(logits: &Tensor) -> Result<Tensor> {
    let (rows, cols) = (logits.dim(0)?, logits.dim(1)?);
    let out = (0..cols)
        .map(|j| {
            (0..rows)
                .map(|i| logits.at2(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// Pick the `top` channels by descending logit, breaking ties toward the
/// lower channel index, and gather their boxes. When fewer than `top`
/// channels exist the remainder is zero padded so the plugin input width
/// stays fixed.
pub fn select_top_channels(
    boxes: &Tensor,
    logits: &Tensor,
    top: usize,
) -> Result<(Tensor, Tensor)> {
    let phi = logits.dim(0)?;
    if boxes.dim(0)? != 4 || boxes.dim(1)? != phi {
        return Err(Error::ShapeMismatch {
            op: "select_top_channels",
            lhs: boxes.shape().to_vec(),
            rhs: vec![4, phi],
        });
    }
    if top == 0 {
        return Err(Error::InvalidArgument {
            op: "select_top_channels",
            message: "selection count must be positive".into(),
        });
    }
    let mut order: Vec<usize> = (0..phi).collect();
    order.sort_by(|&a, &b| {
        logits.data()[b]
            .partial_cmp(&logits.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(top);
    let mut sel_boxes = vec![0.0; 4 * top];
    let mut sel_logits = vec![0.0; top];
    for (slot, &j) in order.iter().enumerate() {
        for d in 0..4 {
            sel_boxes[d * top + slot] = boxes.at2(d, j);
        }
        sel_logits[slot] = logits.data()[j];
    }
    Ok((
        Tensor::from_vec(vec![4, top], sel_boxes)?,
        Tensor::vector(sel_logits),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_max_example() {
        let logits = Tensor::from_rows(&[&[1.0, 5.0], &[3.0, 2.0]]).unwrap();
        let m = column_max(&logits).unwrap();
        assert_eq!(m.data(), &[3.0, 5.0]);
    }

    #[test]
    fn top_selection_orders_and_breaks_ties_low_index_first() {
        let phi = 12;
        let logits = Tensor::vector(vec![
            0.5, 2.0, 2.0, -1.0, 0.9, 3.5, 0.5, 1.1, 0.0, 2.7, -0.2, 1.4,
        ]);
        let boxes = Tensor::from_vec(
            vec![4, phi],
            (0..4 * phi).map(|i| i as f64).collect(),
        )
        .unwrap();
        let (sel_boxes, sel_logits) = select_top_channels(&boxes, &logits, 10).unwrap();
        assert_eq!(sel_boxes.shape(), &[4, 10]);
        // Descending logits; the tied pair (channels 1 and 2 at 2.0) keeps
        // channel order.
        assert_eq!(
            sel_logits.data(),
            &[3.5, 2.7, 2.0, 2.0, 1.4, 1.1, 0.9, 0.5, 0.5, 0.0]
        );
        // First selected channel is 5; its boxes land in slot 0.
        assert_eq!(sel_boxes.at2(0, 0), 5.0);
        assert_eq!(sel_boxes.at2(3, 0), (3 * phi + 5) as f64);
        // The 2.0 tie resolves to channel 1 before channel 2.
        assert_eq!(sel_boxes.at2(0, 2), 1.0);
        assert_eq!(sel_boxes.at2(0, 3), 2.0);
    }

    #[test]
    fn short_inputs_zero_pad() {
        let logits = Tensor::vector(vec![1.0, 2.0]);
        let boxes = Tensor::from_vec(vec![4, 2], vec![9.0; 8]).unwrap();
        let (sel_boxes, sel_logits) = select_top_channels(&boxes, &logits, 4).unwrap();
        assert_eq!(sel_logits.data(), &[2.0, 1.0, 0.0, 0.0]);
        assert_eq!(sel_boxes.at2(0, 2), 0.0);
    }

    #[test]
    fn threshold_counter_one_hot() {
        let c = ThresholdCounter { threshold: 0.5 };
        let boxes = Tensor::zeros(&[4, 3]);
        let logits = Tensor::vector(vec![2.0, -1.0, 0.5]);
        let out = c.count(&boxes, &logits);
        // sigmoid(2.0) and sigmoid(0.5) clear 0.5; sigmoid(-1.0) does not.
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 0.0]);
    }
}
