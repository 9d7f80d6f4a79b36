#![allow(dead_code)]

pub mod gradcheck;

use feddspg::numcore::Tensor;

pub const FD_STEP: f32 = 1e-3;

/// Central differences `(f(p + h) − f(p − h)) / 2h` for every element of every parameter.
pub fn central_differences<F>(params: &[Tensor], mut loss: F) -> Vec<Vec<f64>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        let mut grads = Vec::with_capacity(params[p].len());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + FD_STEP;
            let up = loss(&work);
            work[p].data_mut()[i] = orig - FD_STEP;
            let down = loss(&work);
            work[p].data_mut()[i] = orig;
            // Divide by the step actually taken in f32.
            let step = f64::from(orig + FD_STEP) - f64::from(orig - FD_STEP);
            grads.push((up - down) / step);
        }
        out.push(grads);
    }
    out
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over all entries.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn grads_of(tensors: &[Tensor]) -> Vec<Vec<f64>> {
    tensors
        .iter()
        .map(|t| {
            t.grad()
                .expect("gradient populated")
                .iter()
                .map(|&g| f64::from(g))
                .collect()
        })
        .collect()
}

/// Minimal f64 matrix used by the gradient oracles. It re-implements every
/// forward formula independently of the tape.
#[derive(Clone, Debug)]
pub struct M64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl M64 {
    pub fn from_tensor(t: &Tensor) -> Self {
        M64 {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|&x| f64::from(x)).collect(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, b: &M64) -> M64 {
        assert_eq!(self.cols, b.rows);
        let mut data = vec![0.0; self.rows * b.cols];
        for i in 0..self.rows {
            for j in 0..b.cols {
                data[i * b.cols + j] = (0..self.cols).map(|p| self.at(i, p) * b.at(p, j)).sum();
            }
        }
        M64 {
            rows: self.rows,
            cols: b.cols,
            data,
        }
    }

    pub fn transpose(&self) -> M64 {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.at(i, j);
            }
        }
        M64 {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Adds `b`, broadcasting a single row if needed.
    pub fn add(&self, b: &M64) -> M64 {
        let data = (0..self.data.len())
            .map(|i| {
                self.data[i]
                    + if b.rows == 1 {
                        b.data[i % self.cols]
                    } else {
                        b.data[i]
                    }
            })
            .collect();
        M64 {
            data,
            ..self.clone()
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> M64 {
        M64 {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..self.clone()
        }
    }

    pub fn scale(&self, s: f64) -> M64 {
        self.map(|x| x * s)
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> M64 {
        M64 {
            rows,
            cols,
            data: self.data.clone(),
        }
    }

    pub fn concat_rows(parts: &[&M64]) -> M64 {
        let cols = parts[0].cols;
        M64 {
            rows: parts.iter().map(|p| p.rows).sum(),
            cols,
            data: parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
        }
    }

    pub fn concat_cols(parts: &[&M64]) -> M64 {
        let rows = parts[0].rows;
        let mut data = Vec::new();
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        M64 {
            rows,
            cols: parts.iter().map(|p| p.cols).sum(),
            data,
        }
    }

    pub fn row_mean(&self) -> M64 {
        let data = (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.at(i, j)).sum::<f64>() / self.rows as f64)
            .collect();
        M64 {
            rows: 1,
            cols: self.cols,
            data,
        }
    }

    pub fn l2_normalize(&self) -> M64 {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            let n = self.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(self.row(r).iter().map(|x| x / n));
        }
        M64 {
            data,
            ..self.clone()
        }
    }

    pub fn cosine_rows(&self, b: &M64) -> M64 {
        let data = (0..self.rows)
            .map(|r| {
                let (x, y) = (self.row(r), b.row(r));
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
                dot / (nx * ny)
            })
            .collect();
        M64 {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Mean cross-entropy of row-wise softmax against labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = self.row(r);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total -= (row[y].exp() / z).ln();
        }
        total / labels.len() as f64
    }

    /// Mean binary cross-entropy of sigmoid(logit) against targets.
    pub fn bce(&self, targets: &[f64]) -> f64 {
        let total: f64 = self
            .data
            .iter()
            .zip(targets)
            .map(|(&x, &t)| {
                let p = Self::sigmoid(x);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        total / targets.len() as f64
    }

    /// Sum of elements weighted by `w` (a fixed projection to a scalar).
    pub fn project(&self, w: &[f64]) -> f64 {
        self.data.iter().zip(w).map(|(a, b)| a * b).sum()
    }
}

/// Central differences of an f64 reference function at f32 parameter values.
pub fn central_differences_f64<F>(params: &[Tensor], mut loss: F) -> Vec<Vec<f64>>
where
    F: FnMut(&[M64]) -> f64,
{
    let h = f64::from(FD_STEP);
    let mut work: Vec<M64> = params.iter().map(M64::from_tensor).collect();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..work.len() {
        let mut grads = Vec::with_capacity(work[p].data.len());
        for i in 0..work[p].data.len() {
            let orig = work[p].data[i];
            work[p].data[i] = orig + h;
            let up = loss(&work);
            work[p].data[i] = orig - h;
            let down = loss(&work);
            work[p].data[i] = orig;
            grads.push((up - down) / (2.0 * h));
        }
        out.push(grads);
    }
    out
}
