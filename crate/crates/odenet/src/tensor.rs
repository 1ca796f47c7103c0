//! Dense row-major f64 tensors and the raw arithmetic used by the tape.
//!
//! Shapes are explicit and validated at the API boundary; all reductions use
//! fixed left-to-right summation order so results are bit-reproducible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: lhs {lhs:?} vs rhs {rhs:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch { expected: usize, shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// Flat row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalar payload of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::RankMismatch {
                expected: 0,
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::RankMismatch {
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// `(n, d)` tensor combined elementwise with a length-`d` row broadcast over
/// the batch axis.
fn check_row_broadcast(op: &'static str, a: &Tensor, row: &Tensor) -> Result<usize, TensorError> {
    let (_, d) = a.dims2().map_err(|_| TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: row.shape.clone(),
    })?;
    if row.shape.as_slice() != [d] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: row.shape.clone(),
        });
    }
    Ok(d)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for k in 0..ka {
            let aik = a.data[i * ka + k];
            let brow = &b.data[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `a^T b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, ka) = a.dims2()?;
    let (mb, n) = b.dims2()?;
    if m != mb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; ka * n];
    for i in 0..m {
        for k in 0..ka {
            let aik = a.data[i * ka + k];
            let brow = &b.data[i * n..(i + 1) * n];
            let orow = &mut out[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::from_vec(vec![ka, n], out)
}

/// `a b^T` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, ka) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let arow = &a.data[i * ka..(i + 1) * ka];
            let brow = &b.data[j * ka..(j + 1) * ka];
            let mut acc = 0.0;
            for k in 0..ka {
                acc += arow[k] * brow[k];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_same_shape("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_same_shape("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_same_shape("mul", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x * c).collect(),
    }
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x + c).collect(),
    }
}

/// y + alpha * x, shapes equal.
pub fn axpy(y: &Tensor, alpha: f64, x: &Tensor) -> Result<Tensor, TensorError> {
    check_same_shape("axpy", y, x)?;
    let data = y
        .data
        .iter()
        .zip(&x.data)
        .map(|(a, b)| a + alpha * b)
        .collect();
    Ok(Tensor {
        shape: y.shape.clone(),
        data,
    })
}

pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor, TensorError> {
    let d = check_row_broadcast("add_row", a, row)?;
    let mut data = a.data.clone();
    for chunk in data.chunks_mut(d) {
        for (x, r) in chunk.iter_mut().zip(&row.data) {
            *x += r;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn sub_row(a: &Tensor, row: &Tensor) -> Result<Tensor, TensorError> {
    let d = check_row_broadcast("sub_row", a, row)?;
    let mut data = a.data.clone();
    for chunk in data.chunks_mut(d) {
        for (x, r) in chunk.iter_mut().zip(&row.data) {
            *x -= r;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn mul_row(a: &Tensor, row: &Tensor) -> Result<Tensor, TensorError> {
    let d = check_row_broadcast("mul_row", a, row)?;
    let mut data = a.data.clone();
    for chunk in data.chunks_mut(d) {
        for (x, r) in chunk.iter_mut().zip(&row.data) {
            *x *= r;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn relu(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x.max(0.0)).collect(),
    }
}

pub fn rsqrt(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| 1.0 / x.sqrt()).collect(),
    }
}

/// Per-feature mean over the batch (first) axis: `(n, d) -> (d)`.
pub fn mean_rows(a: &Tensor) -> Result<Tensor, TensorError> {
    let (n, d) = a.dims2()?;
    let mut out = vec![0.0; d];
    for chunk in a.data.chunks(d) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    for o in out.iter_mut() {
        *o /= n as f64;
    }
    Tensor::from_vec(vec![d], out)
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum())
}

/// Row-wise softmax of `(n, c)` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor, TensorError> {
    let (_, c) = logits.dims2()?;
    let mut data = logits.data.clone();
    for row in data.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    Ok(Tensor {
        shape: logits.shape().to_vec(),
        data,
    })
}

/// Mean softmax cross-entropy of `(n, c)` logits against integer labels.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64, TensorError> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut total = 0.0;
    for (row, &label) in logits.data.chunks(c).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        total += log_z - row[label];
    }
    Ok(total / n as f64)
}
