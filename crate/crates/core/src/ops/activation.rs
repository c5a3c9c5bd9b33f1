use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Gradient of [`relu`] given its input.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_out, "relu_backward", |v, g| {
        if v > T::ZERO {
            g
        } else {
            T::ZERO
        }
    })
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    // split on sign so exp never overflows
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of [`sigmoid`] given its output.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(grad_out, "sigmoid_backward", |s, g| g * s * (T::ONE - s))
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Gradient of [`tanh`] given its output.
pub fn tanh_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(grad_out, "tanh_backward", |t, g| g * (T::ONE - t * t))
}

/// Hadamard product.
pub fn elementwise_mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out = a.zip_map(b, "elementwise_mul", |x, y| x * y)?;
    out.check_finite("elementwise_mul")?;
    Ok(out)
}

/// Returns `(grad_a, grad_b)`.
pub fn elementwise_mul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((
        grad_out.zip_map(b, "elementwise_mul_backward", |g, y| g * y)?,
        grad_out.zip_map(a, "elementwise_mul_backward", |g, x| g * x)?,
    ))
}
