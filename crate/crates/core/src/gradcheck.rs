//! Finite-difference gradient checks over closures that use crate errors.

use glean_autograd::gradcheck::{check_input_gradient, GradCheck};
use glean_autograd::{Tensor, TensorError, Var};

use crate::error::Result;

/// Central-difference check of `d f(x) / dx` along a random projection.
pub fn check_gradient<F>(input: &Tensor, step: f32, seed: u64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    Ok(check_input_gradient(input, step, seed, |x| f(x).map_err(|e| TensorError::InvalidArgument(e.to_string())))?)
}
