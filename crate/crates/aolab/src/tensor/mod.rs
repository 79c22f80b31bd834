//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Everything runs in 64-bit: the correctness story of this crate rests on
//! central finite differences, which are meaningless at 32-bit. The tape is
//! rebuilt every step; there is no persistent graph.

mod adam;
mod gradcheck;
mod kernels;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use gradcheck::grad_check;
pub use kernels::{gelu_grad, gelu_scalar, layer_norm_row, matmul_nn, matvec, softmax_row};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A dense tensor: a shape and a flat row-major value buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Gaussian init, mean 0.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        // Box-Muller on the raw stream keeps us independent of distribution
        // crate version details.
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            data.push(r * c * std);
            if data.len() < numel {
                data.push(r * s * std);
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count of a 2-d tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-d tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn is_2d(&self) -> bool {
        self.shape.len() == 2
    }

    /// Extract the single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "Tensor::item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.cols();
        &self.data[r * n..(r + 1) * n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn new_rejects_shape_value_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn randn_is_deterministic_and_roughly_scaled() {
        let mut r1 = stream(3, Purpose::WeightInit, 0);
        let mut r2 = stream(3, Purpose::WeightInit, 0);
        let a = Tensor::randn(&[100, 10], 0.02, &mut r1);
        let b = Tensor::randn(&[100, 10], 0.02, &mut r2);
        assert_eq!(a, b);
        let var: f64 = a.data().iter().map(|x| x * x).sum::<f64>() / 1000.0;
        assert!((var.sqrt() - 0.02).abs() < 0.005, "std {}", var.sqrt());
    }
}
