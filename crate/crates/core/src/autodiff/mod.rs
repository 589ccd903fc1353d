//! Reverse-mode differentiation over [`Tensor`] values.

mod optim;
mod tape;

pub use optim::{Adam, Sgd};
pub use tape::{Gradients, Tape, Var};

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Largest per-coordinate relative error between the tape gradient of `f`
/// at `point` and a central finite difference with step `eps`.
///
/// The relative error of one coordinate is `|a − n| / max(1, |a|, |n|)`.
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let eval = |p: &Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let x = tape.param(p.clone());
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.get(x);

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for k in 0..point.len() {
        let orig = point.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[k];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
