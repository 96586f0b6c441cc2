//! Dense tensors and tape-based reverse-mode gradients.

mod tape;
mod tensor;

pub mod init;

pub use tape::{Tape, Var, LAYER_NORM_EPS, MASK_VALUE};
pub use tensor::{matmul, ParamId, ParamStore, Tensor};

use crate::error::Result;

/// Masked mean cross-entropy of `logits` (rows × V) evaluated eagerly.
pub fn softmax_ce_loss(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let loss = tape.cross_entropy(l, targets, mask)?;
    Ok(tape.scalar(loss))
}

/// Central finite-difference gradient of a scalar function of one tensor.
///
/// Used by the gradient checks; lives here so integration tests can share it.
pub fn numeric_grad<F>(x: &Tensor, step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|analytic − numeric| / (|numeric| + 1e-8)`, maximized over entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}
