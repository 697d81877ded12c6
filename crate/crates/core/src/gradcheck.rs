//! Finite-difference gradient checking. The checker only ever calls the
//! forward path, so it is independent of the tape's backward rules and can
//! vouch for them.

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Central-difference step.
pub const DEFAULT_H: f64 = 1e-5;

/// Relative error with a small floor so near-zero gradients are compared on
/// an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Central finite differences of `f` at `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Checks the tape gradient of a scalar-valued function of one tensor
/// against central differences; returns the maximum relative error.
pub fn check_tensor_grad(
    x0: &[f64],
    shape: &[usize],
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    h: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.watch(&Tensor::from_vec(x0.to_vec(), shape));
    let y = f(&x)?;
    y.backward()?;
    let analytic = x.grad().expect("watched tensor has a gradient");

    let mut eval = |data: &[f64]| -> Result<f64> {
        let t = Tensor::from_vec(data.to_vec(), shape);
        Ok(f(&t)?.item())
    };
    let numeric = central_diff(&mut eval, x0, h)?;
    Ok(max_rel_err(&analytic, &numeric))
}
