//! Dense f64 tensors and the reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain value: a shape and row-major `f64` storage. All
//! differentiable computation goes through a [`tape::Tape`], which records
//! primitive operations during the forward pass and replays them in reverse
//! to accumulate gradients.

mod adam;
mod checkpoint;
mod conv;
pub mod gradcheck;
pub mod tape;

pub use adam::AdamState;
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use tape::{Mode, Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major f64 array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from shape and row-major data. Fails unless
    /// `product(shape) == data.len()`.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(v: &[f64]) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    /// Row-major matrix from nested rows; rows must be equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("matrix", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, different shape. Element count must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() on non-matrix");
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Stack same-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "empty input"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::shape(
                    "stack",
                    format!("mixed shapes {:?} vs {:?}", t.shape(), first.shape()),
                ));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn stack_builds_batch_axis() {
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[3.0, 4.0]);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn stack_rejects_mixed_shapes() {
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[3.0]);
        assert!(Tensor::stack(&[&a, &b]).is_err());
    }
}
