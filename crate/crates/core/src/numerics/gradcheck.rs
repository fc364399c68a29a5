//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Builds a scalar loss on a fresh tape from the input variable.
pub trait ScalarFn: Fn(&mut Tape<f64>, Var) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, Var) -> Result<Var>> ScalarFn for F {}

fn eval(f: &impl ScalarFn, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(value)
}

/// Analytic gradient of `f` at `x` from the tape.
pub fn analytic_grad(f: &impl ScalarFn, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let mut grads = tape.backward(out)?;
    Ok(grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Central difference `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps` at coordinate `i`.
pub fn numeric_partial(f: &impl ScalarFn, x: &Tensor<f64>, i: usize, eps: f64) -> Result<f64> {
    let mut xp = x.clone();
    xp.data_mut()[i] += eps;
    let mut xm = x.clone();
    xm.data_mut()[i] -= eps;
    Ok((eval(f, &xp)? - eval(f, &xm)?) / (2.0 * eps))
}

/// Maximum over coordinates of `|analytic − numeric| / (|numeric| + 1e-12)`.
pub fn grad_check(f: impl ScalarFn, x: &Tensor<f64>, eps: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// [`grad_check`] restricted to the given flat coordinates.
pub fn grad_check_coords(f: impl ScalarFn, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64> {
    let analytic = analytic_grad(&f, x)?;
    let mut worst = 0.0_f64;
    for &i in coords {
        let numeric = numeric_partial(&f, x, i, eps)?;
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
