//! Fully-connected (affine) layer.

use crate::error::{Error, Result};
use crate::layers::{axpy, dot_wide};
use crate::tensor::{Element, Tensor};

/// Affine map `out = W x + b` with `W` stored as `[out_dim, in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer<E: Element = f32> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> FcLayer<E> {
    pub fn new(in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("fc dimensions must be positive"));
        }
        Ok(FcLayer {
            in_dim,
            out_dim,
            weights: Tensor::zeros(&[out_dim, in_dim])?,
            bias: Tensor::zeros(&[out_dim])?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }

    fn check_input(&self, input: &Tensor<E>) -> Result<()> {
        if input.len() != self.in_dim {
            return Err(Error::shape(format!(
                "fc expects {} inputs, got shape {:?}",
                self.in_dim,
                input.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_input(input)?;
        let mut out = Tensor::zeros(&[self.out_dim])?;
        let x = input.data();
        let w = self.weights.data();
        for (o, out_v) in out.data_mut().iter_mut().enumerate() {
            *out_v = self.bias.data()[o] + dot_wide(&w[o * self.in_dim..(o + 1) * self.in_dim], x);
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        input: &Tensor<E>,
        grad_out: &Tensor<E>,
        want_grad_input: bool,
    ) -> Result<(Option<Tensor<E>>, Tensor<E>, Tensor<E>)> {
        self.check_input(input)?;
        if grad_out.len() != self.out_dim {
            return Err(Error::shape(format!(
                "fc grad_out expects {} entries, got {:?}",
                self.out_dim,
                grad_out.shape()
            )));
        }
        let x = input.data();
        let g = grad_out.data();

        let mut grad_w = Tensor::zeros(self.weights.shape())?;
        for o in 0..self.out_dim {
            axpy(
                &mut grad_w.data_mut()[o * self.in_dim..(o + 1) * self.in_dim],
                g[o],
                x,
            );
        }
        let grad_b = Tensor::from_vec(&[self.out_dim], g.to_vec())?;

        let grad_in = if want_grad_input {
            let mut gi = Tensor::zeros(&[self.in_dim])?;
            for o in 0..self.out_dim {
                axpy(
                    gi.data_mut(),
                    g[o],
                    &self.weights.data()[o * self.in_dim..(o + 1) * self.in_dim],
                );
            }
            Some(gi)
        } else {
            None
        };
        Ok((grad_in, grad_w, grad_b))
    }
}
