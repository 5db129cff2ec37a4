//! Pointwise nonlinearities.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// ELU with alpha = 1: x for x > 0, exp(x) - 1 otherwise.
pub fn elu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let y = x.map(|v| if v > T::zero() { v } else { v.exp() - T::one() });
    y.debug_check_finite("elu");
    y
}

/// d elu / dx, taking the linear branch (slope 1) at x = 0.
pub fn elu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(x.dims(), dy.dims());
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v >= T::zero() { g } else { g * v.exp() })
        .collect();
    Tensor::from_vec(x.dims(), data).expect("same dims")
}

/// max(0, x)
pub fn rectifier<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn rectifier_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(x.dims(), dy.dims());
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.dims(), data).expect("same dims")
}
