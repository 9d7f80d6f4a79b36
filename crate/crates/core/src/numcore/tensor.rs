use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense row-major `rows × cols` matrix of `f32` with an optional gradient slot.
///
/// Gradients accumulate across backward passes until [`Tensor::zero_grad`]
/// is called.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &(self.rows, self.cols))
            .field("requires_grad", &self.requires_grad)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Tensor {
            rows,
            cols,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// Builds a tensor from nested rows. Panics on ragged input; meant for tests and literals.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor {
            rows: rows.len(),
            cols,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn row_vector(values: &[f32]) -> Self {
        Tensor::from_rows(&[values])
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::row_vector(&[value])
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
            .collect();
        Tensor {
            rows,
            cols,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Copies one row out as a `1 × cols` tensor.
    pub fn row_tensor(&self, row: usize) -> Tensor {
        Tensor::row_vector(self.row(row))
    }

    /// Same data, new shape. Fails when the element counts differ.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape(),
                right: (rows, cols),
            });
        }
        Tensor::from_vec(rows, cols, self.data.clone())
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for t in parts {
            if t.cols != cols {
                return Err(Error::Dimension {
                    op: "stack_rows",
                    left: (rows, cols),
                    right: t.shape(),
                });
            }
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        Tensor::from_vec(rows, cols, data)
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                left: self.shape(),
                right: (delta.len(), 1),
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean distance between two same-shaped tensors.
    pub fn distance(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op: "distance",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum::<f64>()
            .sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise identity of shape and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// FNV-1a over shape and little-endian payload bytes.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::checksum::Fnv1a::new();
        h.update(&(self.rows as u64).to_le_bytes());
        h.update(&(self.cols as u64).to_le_bytes());
        for x in &self.data {
            h.update(&x.to_le_bytes());
        }
        h.finish()
    }
}
