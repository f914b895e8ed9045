//! Dense row-major f64 tensors.
//!
//! All model parameters and intermediate values live in this one type.
//! Entries are finite by construction: constructors and every graph op
//! reject NaN/Inf instead of letting it propagate.

use crate::error::{EvaError, Result};
use crate::rng::StreamRng;

/// Dense N-dimensional array of 64-bit reals in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(EvaError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(EvaError::InvalidArgument(format!(
                "non-finite entry {bad} in tensor data"
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        Tensor {
            data: vec![value; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor::full(&[], value)
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// I.i.d. standard-normal entries scaled by `scale`.
    pub fn randn(shape: &[usize], scale: f64, rng: &mut StreamRng) -> Self {
        let mut data = vec![0.0; numel(shape)];
        rng.fill_normal(&mut data);
        for v in &mut data {
            *v *= scale;
        }
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizers. Callers must keep entries finite;
    /// `validate` re-checks the invariant.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(EvaError::ShapeMismatch(format!(
                "grad length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn validate(&self) -> Result<()> {
        if numel(&self.shape) != self.data.len() {
            return Err(EvaError::ShapeMismatch(
                "shape/data length disagreement".into(),
            ));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(EvaError::NonFinite {
                node: "tensor".into(),
            });
        }
        if let Some(g) = &self.grad {
            if g.len() != self.data.len() {
                return Err(EvaError::ShapeMismatch(
                    "grad/data length disagreement".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = Tensor::scalar(4.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 4.5);
    }

    #[test]
    fn grad_length_checked() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.set_grad(vec![0.0; 2]).is_err());
        assert!(t.set_grad(vec![1.0, 2.0, 3.0]).is_ok());
        assert_eq!(t.grad().unwrap(), &[1.0, 2.0, 3.0]);
    }
}
