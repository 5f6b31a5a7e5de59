use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// N-dimensional array of 32-bit values. Feature maps use the canonical
/// 5-axis layout (batch, channel, depth, height, width), width fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != product of shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Gaussian-initialized tensor (mean 0, given standard deviation).
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f32, _>(StandardNormal)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f32> {
        if !self.is_scalar() {
            return Err(Error::ShapeMismatch(format!("expected scalar, got {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// The (batch, channel, depth, height, width) extents of a 5-d tensor.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        if self.shape.len() != 5 {
            return Err(Error::ShapeMismatch(format!("expected 5-d tensor, got {:?}", self.shape)));
        }
        Ok([self.shape[0], self.shape[1], self.shape[2], self.shape[3], self.shape[4]])
    }

    pub fn first_non_finite(&self) -> Option<f32> {
        self.data.iter().find(|v| !v.is_finite()).copied()
    }
}
