//! Dense tensors, a reverse-mode tape over a fixed set of matrix
//! primitives, and the Adam optimizer.

mod optim;
mod tape;
mod tensor;

pub use optim::Adam;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub use tape::log_sum_exp;
pub(crate) use tape::softmax_in_place;

use crate::error::{Error, Result};

/// Softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// `-log softmax(logits · temperature)[true_class]`.
pub fn cross_entropy(logits: &[f64], true_class: usize, temperature: f64) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Config(
            "cross entropy needs at least two classes".into(),
        ));
    }
    if true_class >= logits.len() {
        return Err(Error::OutOfRange {
            what: "classes",
            index: true_class,
            len: logits.len(),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x * temperature).collect();
    Ok(log_sum_exp(&scaled) - scaled[true_class])
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
