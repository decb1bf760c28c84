//! Dense tensor storage and the numeric kernels everything else is built on.
//!
//! Tensors are immutable once returned from an operation. Activations use
//! NCHW layout throughout; matrices are row-major. All arithmetic is f64.
//!
//! Kernels may parallelize internally but always produce results identical
//! to their documented sequential reduction order, so runs are reproducible
//! regardless of thread count.

use crate::error::{Error, Result};
use crate::rng::Rng;
use rayon::prelude::*;

/// Dense N-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_raw(self) -> Vec<f64> {
        self.data
    }

    /// Same data, new shape; element counts must agree.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1]
    }

    fn check_matrix(&self, name: &str) -> Result<()> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{name} must be a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise add: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise sub: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product `A[r x k] * B[k x c]`.
///
/// Each output element is accumulated over `t = 0..k` in ascending order;
/// rows are independent, so the row-parallel path is bit-identical to the
/// sequential one.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_matrix("matmul lhs")?;
    b.check_matrix("matmul rhs")?;
    if a.cols() != b.rows() {
        return Err(Error::Dimension(format!(
            "matmul: inner dimensions disagree, lhs {:?} vs rhs {:?}",
            a.shape, b.shape
        )));
    }
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; r * c];
    let av = &a.data;
    let bv = &b.data;
    out.par_chunks_mut(c).enumerate().for_each(|(i, crow)| {
        let arow = &av[i * k..(i + 1) * k];
        for (t, &ait) in arow.iter().enumerate() {
            let brow = &bv[t * c..(t + 1) * c];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += ait * bj;
            }
        }
    });
    Tensor::from_vec(&[r, c], out)
}

/// Chunk length for the `t` reduction in [`matmul_tn`]. Fixed so the
/// combine order is independent of thread count.
const TN_CHUNK: usize = 1024;

/// Transposed-lhs product `A^T * B` for `A[k x r]`, `B[k x c]` without
/// materializing `A^T`.
///
/// The reduction over `t` is defined chunkwise: partial sums over fixed
/// blocks of `TN_CHUNK` rows (ascending within each block), combined in
/// ascending block order.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_matrix("matmul_tn lhs")?;
    b.check_matrix("matmul_tn rhs")?;
    if a.rows() != b.rows() {
        return Err(Error::Dimension(format!(
            "matmul_tn: outer dimensions disagree, lhs {:?} vs rhs {:?}",
            a.shape, b.shape
        )));
    }
    let (k, r, c) = (a.rows(), a.cols(), b.cols());
    let av = &a.data;
    let bv = &b.data;
    let partials: Vec<Vec<f64>> = (0..k.div_ceil(TN_CHUNK))
        .into_par_iter()
        .map(|blk| {
            let t0 = blk * TN_CHUNK;
            let t1 = (t0 + TN_CHUNK).min(k);
            let mut part = vec![0.0; r * c];
            for t in t0..t1 {
                let arow = &av[t * r..(t + 1) * r];
                let brow = &bv[t * c..(t + 1) * c];
                for (i, &ati) in arow.iter().enumerate() {
                    let prow = &mut part[i * c..(i + 1) * c];
                    for (pj, bj) in prow.iter_mut().zip(brow) {
                        *pj += ati * bj;
                    }
                }
            }
            part
        })
        .collect();
    let mut out = vec![0.0; r * c];
    for part in &partials {
        for (o, p) in out.iter_mut().zip(part) {
            *o += p;
        }
    }
    Tensor::from_vec(&[r, c], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    a.check_matrix("transpose")?;
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

/// Mean of squares, `(1/n) * sum(t_i^2)` — the q statistic of an error
/// tensor. Summation is sequential in index order.
pub fn second_moment(t: &Tensor) -> Result<f64> {
    if t.is_empty() {
        return Err(Error::Domain("second_moment of an empty tensor".into()));
    }
    let mut acc = 0.0;
    for v in &t.data {
        acc += v * v;
    }
    Ok(acc / t.len() as f64)
}

/// i.i.d. normal samples filled in row-major order; deterministic per seed.
pub fn gaussian(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if std < 0.0 {
        return Err(Error::Domain(format!("negative std {std}")));
    }
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| mean + std * rng.normal()).collect();
    Tensor::from_vec(shape, data)
}
