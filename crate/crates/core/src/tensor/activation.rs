use super::{Real, Tensor};
use crate::error::Result;

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Masks `grad_out` by `v > 0`. `activation` may be either the ReLU input or
/// its output; both have the same sign pattern. The derivative at 0 is 0.
pub fn relu_adjoint<T: Real>(activation: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(activation.shape(), "relu_adjoint")?;
    let data = activation
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::from_vec(activation.shape(), data)
}

#[inline]
fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Adjoint of [`sigmoid`] expressed through its output `s`: `s(1-s)·g`.
pub fn sigmoid_adjoint<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(output.shape(), "sigmoid_adjoint")?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| s * (T::ONE - s) * g)
        .collect();
    Tensor::from_vec(output.shape(), data)
}
