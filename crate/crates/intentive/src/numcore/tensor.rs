use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats. One or two dimensions; a
/// vector of length n is treated by every operation as a 1×n matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::InvalidInput(format!(
                "tensor rank must be 1 or 2, got shape {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                detail: format!("shape {shape:?} implies {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    /// Truncated-normal initialization: N(0, sigma²) resampled until
    /// within ±2 sigma. Used for every trainable tensor except the
    /// zero projections.
    pub fn trunc_normal<R: Rng>(shape: &[usize], sigma: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, sigma).expect("sigma must be finite and positive");
        let n: usize = shape.iter().product();
        let bound = 2.0 * sigma;
        let data = (0..n)
            .map(|_| loop {
                let x = dist.sample(rng);
                if x.abs() <= bound {
                    break x;
                }
            })
            .collect();
        Self { shape: shape.to_vec(), data, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
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

    /// Squared Frobenius norm; handy for harmlessness checks.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}
