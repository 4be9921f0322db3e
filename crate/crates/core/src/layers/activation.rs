//! Elementwise non-linearities.

use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};

/// Non-linearity selector for a network's activation sublayers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Tanh,
    Relu,
}

pub fn tanh_forward<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let mut out = input.clone();
    E::tanh_slice(input.data(), out.data_mut());
    out
}

/// `d tanh(x) / dx = 1 - tanh(x)^2`, expressed through the cached output.
pub fn tanh_backward<E: Element>(output: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    debug_assert_eq!(output.shape(), grad_out.shape());
    let mut grad_in = grad_out.clone();
    for (g, &o) in grad_in.data_mut().iter_mut().zip(output.data()) {
        *g *= E::ONE - o * o;
    }
    grad_in
}

pub fn relu_forward<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    input.map(|v| v.max_of(E::ZERO))
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<E: Element>(input: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    debug_assert_eq!(input.shape(), grad_out.shape());
    let mut grad_in = grad_out.clone();
    for (g, &x) in grad_in.data_mut().iter_mut().zip(input.data()) {
        if x <= E::ZERO {
            *g = E::ZERO;
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_at_zero() {
        let input: Tensor = Tensor::zeros(&[3]).unwrap();
        let out = tanh_forward(&input);
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let input: Tensor = Tensor::from_vec(&[2], vec![-2.5, 3.0]).unwrap();
        let out = relu_forward(&input);
        assert_eq!(out.data(), &[0.0, 3.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let input: Tensor = Tensor::from_vec(&[3], vec![-1.0, 0.0, 1.0]).unwrap();
        let grad_out = Tensor::filled(&[3], 1.0).unwrap();
        let grad_in = relu_backward(&input, &grad_out);
        assert_eq!(grad_in.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn tanh_backward_uses_output() {
        let input: Tensor<f64> = Tensor::from_vec(&[2], vec![0.3, -1.2]).unwrap();
        let output = tanh_forward(&input);
        let grad_out = Tensor::filled(&[2], 1.0).unwrap();
        let grad_in = tanh_backward(&output, &grad_out);
        for i in 0..2 {
            let t = input.data()[i].tanh();
            assert!((grad_in.data()[i] - (1.0 - t * t)).abs() < 1e-15);
        }
    }
}
