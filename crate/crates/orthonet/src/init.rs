//! Kernel initializers: orthonormal (Gram-Schmidt, with group-wise fallback
//! when the fan-out exceeds the fan-in) and the Gaussian baselines.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A convolution kernel bank viewed as an `f_in x f_out` matrix.
///
/// `f_in = kw * kh * c`, `f_out = m`. Column `j` of the matrix is the
/// flattened kernel of output channel `j`; the flat row index for kernel
/// element `(c, kh, kw)` is `c * (kh_total * kw_total) + kh * kw_total + kw`,
/// matching the patch layout produced by the convolution's im2col.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    kw: usize,
    kh: usize,
    c: usize,
    m: usize,
    /// Row-major `f_in x f_out`.
    values: Vec<f64>,
    groups: GroupPartition,
}

/// Disjoint contiguous column ranges covering `[0, f_out)`, each of size at
/// most `f_in`. Orthonormalization and the orthonormal penalty act within
/// each group independently.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    ranges: Vec<std::ops::Range<usize>>,
}

impl GroupPartition {
    pub fn ranges(&self) -> &[std::ops::Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

/// Split `f_out` columns into ceil(f_out / f_in) contiguous groups, all of
/// size `f_in` except a final remainder group. One group when
/// `f_out <= f_in`.
pub fn partition_groups(f_in: usize, f_out: usize) -> GroupPartition {
    assert!(f_in >= 1 && f_out >= 1, "dims must be positive");
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < f_out {
        let end = (start + f_in).min(f_out);
        ranges.push(start..end);
        start = end;
    }
    GroupPartition { ranges }
}

impl KernelMatrix {
    pub fn new(kw: usize, kh: usize, c: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if kw == 0 || kh == 0 || c == 0 || m == 0 {
            return Err(Error::Domain(format!(
                "kernel dims must be positive, got ({kw},{kh},{c},{m})"
            )));
        }
        let f_in = kw * kh * c;
        if values.len() != f_in * m {
            return Err(Error::Dimension(format!(
                "kernel ({kw},{kh},{c},{m}) needs {} values, got {}",
                f_in * m,
                values.len()
            )));
        }
        Ok(KernelMatrix {
            kw,
            kh,
            c,
            m,
            values,
            groups: partition_groups(f_in, m),
        })
    }

    pub fn zeros(kw: usize, kh: usize, c: usize, m: usize) -> Result<Self> {
        let len = kw * kh * c * m;
        KernelMatrix::new(kw, kh, c, m, vec![0.0; len])
    }

    pub fn f_in(&self) -> usize {
        self.kw * self.kh * self.c
    }

    pub fn f_out(&self) -> usize {
        self.m
    }

    /// (kw, kh, in-channels, out-channels)
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.kw, self.kh, self.c, self.m)
    }

    pub fn groups(&self) -> &GroupPartition {
        &self.groups
    }

    /// Layers whose fan-out exceeds the fan-in need group-wise treatment.
    pub fn is_grouped(&self) -> bool {
        self.groups.len() > 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// The `f_in x f_out` matrix view.
    pub fn as_matrix(&self) -> Tensor {
        Tensor::from_vec(&[self.f_in(), self.m], self.values.clone())
            .expect("kernel invariant: values.len() == f_in * f_out")
    }

    /// Kernel element for output channel `m` at `(c, kh, kw)`.
    pub fn at(&self, kw: usize, kh: usize, c: usize, m: usize) -> f64 {
        let row = c * (self.kh * self.kw) + kh * self.kw + kw;
        self.values[row * self.m + m]
    }

    /// Flatten into the conventional `[M, C, kH, kW]` filter stack.
    pub fn to_filter_stack(&self) -> Tensor {
        let (kw, kh, c, m) = self.dims();
        let mut out = vec![0.0; m * c * kh * kw];
        for om in 0..m {
            for ic in 0..c {
                for y in 0..kh {
                    for x in 0..kw {
                        out[((om * c + ic) * kh + y) * kw + x] = self.at(x, y, ic, om);
                    }
                }
            }
        }
        Tensor::from_vec(&[m, c, kh, kw], out).expect("stack size")
    }

    /// Inverse of [`to_filter_stack`]; the round-trip is lossless.
    pub fn from_filter_stack(stack: &Tensor) -> Result<Self> {
        let s = stack.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!(
                "filter stack must be 4-D [M,C,kH,kW], got {:?}",
                s
            )));
        }
        let (m, c, kh, kw) = (s[0], s[1], s[2], s[3]);
        let mut k = KernelMatrix::zeros(kw, kh, c, m)?;
        for om in 0..m {
            for ic in 0..c {
                for y in 0..kh {
                    for x in 0..kw {
                        let row = ic * (kh * kw) + y * kw + x;
                        k.values[row * m + om] = stack.data()[((om * c + ic) * kh + y) * kw + x];
                    }
                }
            }
        }
        Ok(k)
    }
}

/// Residual norm below which a candidate column is treated as linearly
/// dependent and redrawn.
const DEGENERACY_EPS: f64 = 1e-8;

/// Orthonormalize the columns of a `d x n` matrix (`n <= d`) by modified
/// Gram-Schmidt with a second re-orthogonalization pass. Column 0 of the
/// output is the normalized input column 0. Near-dependent columns are
/// replaced by fresh Gaussian draws and re-orthogonalized.
pub fn gram_schmidt(vectors: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let shape = vectors.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "gram_schmidt expects a matrix, got {:?}",
            shape
        )));
    }
    let (d, n) = (shape[0], shape[1]);
    if n > d {
        return Err(Error::Domain(format!(
            "cannot orthonormalize {n} vectors in {d} dimensions; \
             partition the columns into groups of size <= {d} (group-wise orthogonalization)"
        )));
    }
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..d).map(|i| vectors.data()[i * n + j]).collect())
        .collect();
    let mut done: Vec<Vec<f64>> = Vec::with_capacity(n);
    let redraw_std = (2.0 / d as f64).sqrt();
    for j in 0..n {
        let mut v = cols[j].clone();
        loop {
            for _pass in 0..2 {
                for q in &done {
                    let r: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                    for (vi, qi) in v.iter_mut().zip(q) {
                        *vi -= r * qi;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm >= DEGENERACY_EPS {
                for vi in v.iter_mut() {
                    *vi /= norm;
                }
                break;
            }
            // degenerate column: redraw and retry
            for vi in v.iter_mut() {
                *vi = redraw_std * rng.normal();
            }
        }
        done.push(v.clone());
        cols[j] = v;
    }
    let mut out = vec![0.0; d * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            out[i * n + j] = x;
        }
    }
    Tensor::from_vec(&[d, n], out)
}

/// Orthonormal kernel initialization: Gaussian draws (std sqrt(2/f_in)),
/// then Gram-Schmidt within each group of the column partition.
pub fn ortho_init(kw: usize, kh: usize, c: usize, m: usize, rng: &mut Rng) -> Result<KernelMatrix> {
    let mut kernel = sample_kernel(kw, kh, c, m, rng, None)?;
    let f_in = kernel.f_in();
    let groups = kernel.groups.clone();
    for g in groups.ranges() {
        let width = g.len();
        let mut sub = vec![0.0; f_in * width];
        for i in 0..f_in {
            for (jj, j) in g.clone().enumerate() {
                sub[i * width + jj] = kernel.values[i * m + j];
            }
        }
        let ortho = gram_schmidt(&Tensor::from_vec(&[f_in, width], sub)?, rng)?;
        for i in 0..f_in {
            for (jj, j) in g.clone().enumerate() {
                kernel.values[i * m + j] = ortho.data()[i * width + jj];
            }
        }
    }
    Ok(kernel)
}

/// Gaussian init with std sqrt(2/f_in).
pub fn msra_init(kw: usize, kh: usize, c: usize, m: usize, rng: &mut Rng) -> Result<KernelMatrix> {
    sample_kernel(kw, kh, c, m, rng, None)
}

/// Plain Gaussian init with a fixed std (the classic pre-msra baseline).
pub fn gaussian_init(
    kw: usize,
    kh: usize,
    c: usize,
    m: usize,
    std: f64,
    rng: &mut Rng,
) -> Result<KernelMatrix> {
    sample_kernel(kw, kh, c, m, rng, Some(std))
}

/// Draw a kernel column by column (channel by channel), each column filled
/// in ascending row order, so the sample sequence is well defined.
fn sample_kernel(
    kw: usize,
    kh: usize,
    c: usize,
    m: usize,
    rng: &mut Rng,
    std_override: Option<f64>,
) -> Result<KernelMatrix> {
    let mut kernel = KernelMatrix::zeros(kw, kh, c, m)?;
    let f_in = kernel.f_in();
    let std = std_override.unwrap_or_else(|| (2.0 / f_in as f64).sqrt());
    if std < 0.0 {
        return Err(Error::Domain(format!("negative std {std}")));
    }
    for j in 0..m {
        for i in 0..f_in {
            kernel.values[i * m + j] = std * rng.normal();
        }
    }
    Ok(kernel)
}

/// Max-norm deviation of `W^T W` from the identity, per group. The global
/// orthonormality residual of a kernel is the max over its groups.
pub fn orthonormality_residual(kernel: &KernelMatrix) -> f64 {
    let f_in = kernel.f_in();
    let m = kernel.f_out();
    let mut worst: f64 = 0.0;
    for g in kernel.groups().ranges() {
        for a in g.clone() {
            for b in g.clone() {
                let mut dot = 0.0;
                for i in 0..f_in {
                    dot += kernel.values[i * m + a] * kernel.values[i * m + b];
                }
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor;

    fn gram_residual(v: &Tensor) -> f64 {
        let vt = tensor::transpose(v).unwrap();
        let prod = tensor::matmul(&vt, v).unwrap();
        let n = v.shape()[1];
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((prod.data()[i * n + j] - target).abs());
            }
        }
        worst
    }

    #[test]
    fn gram_schmidt_hand_case() {
        // columns (2,0) and (1,1) -> (1,0) and (0,1)
        let v = Tensor::from_vec(&[2, 2], vec![2.0, 1.0, 0.0, 1.0]).unwrap();
        let q = gram_schmidt(&v, &mut Rng::new(0)).unwrap();
        let want = [1.0, 0.0, 0.0, 1.0];
        for (a, b) in q.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{:?}", q.data());
        }
    }

    #[test]
    fn gram_schmidt_fixed_point_and_idempotence() {
        let mut rng = Rng::new(21);
        let v = tensor::gaussian(&mut rng, &[16, 8], 0.0, 1.0).unwrap();
        let q1 = gram_schmidt(&v, &mut rng).unwrap();
        let q2 = gram_schmidt(&q1, &mut Rng::new(0)).unwrap();
        let drift = q1
            .data()
            .iter()
            .zip(q2.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(drift < 1e-12, "idempotence drift {drift}");
    }

    #[test]
    fn gram_schmidt_random_64x16() {
        let mut rng = Rng::new(3);
        let v = tensor::gaussian(&mut rng, &[64, 16], 0.0, 1.0).unwrap();
        let q = gram_schmidt(&v, &mut rng).unwrap();
        assert!(gram_residual(&q) < 1e-10);
    }

    #[test]
    fn gram_schmidt_keeps_first_column_direction() {
        let mut rng = Rng::new(4);
        let v = tensor::gaussian(&mut rng, &[10, 4], 0.0, 1.0).unwrap();
        let q = gram_schmidt(&v, &mut rng).unwrap();
        let norm: f64 = (0..10).map(|i| v.data()[i * 4] * v.data()[i * 4]).sum::<f64>().sqrt();
        for i in 0..10 {
            assert!((q.data()[i * 4] - v.data()[i * 4] / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_schmidt_redraws_degenerate_columns() {
        // second column is an exact copy of the first
        let v = Tensor::from_vec(&[3, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let q = gram_schmidt(&v, &mut Rng::new(5)).unwrap();
        assert!(gram_residual(&q) < 1e-10);
    }

    #[test]
    fn gram_schmidt_too_many_vectors_mentions_groups() {
        let v = Tensor::zeros(&[3, 5]);
        let err = gram_schmidt(&v, &mut Rng::new(0)).unwrap_err().to_string();
        assert!(err.contains("group"), "{err}");
    }

    #[test]
    fn partition_cases() {
        assert_eq!(partition_groups(144, 32).ranges(), &[0..32]);
        assert_eq!(partition_groups(27, 27).ranges(), &[0..27]);
        assert_eq!(
            partition_groups(64, 256).ranges(),
            &[0..64, 64..128, 128..192, 192..256]
        );
        assert_eq!(partition_groups(4, 10).ranges(), &[0..4, 4..8, 8..10]);
    }

    #[test]
    fn ortho_init_full_rank_case() {
        let mut rng = Rng::new(7);
        let k = ortho_init(3, 3, 16, 16, &mut rng).unwrap();
        assert!(!k.is_grouped());
        assert!(orthonormality_residual(&k) < 1e-10);
    }

    #[test]
    fn ortho_init_grouped_case() {
        let mut rng = Rng::new(8);
        let k = ortho_init(1, 1, 4, 8, &mut rng).unwrap();
        assert_eq!(k.groups().len(), 2);
        assert!(orthonormality_residual(&k) < 1e-10);
        // cross-group columns are generally not orthogonal
        let w = k.as_matrix();
        let wt = tensor::transpose(&w).unwrap();
        let prod = tensor::matmul(&wt, &w).unwrap();
        let cross = (0..4)
            .flat_map(|i| (4..8).map(move |j| (i, j)))
            .map(|(i, j)| prod.data()[i * 8 + j].abs())
            .fold(0.0f64, f64::max);
        assert!(cross > 1e-6, "grouped init should not be globally orthogonal");
    }

    #[test]
    fn ortho_init_unit_columns() {
        let mut rng = Rng::new(9);
        for &(kw, kh, c, m) in &[(3, 3, 4, 4), (1, 1, 4, 8), (3, 3, 2, 16)] {
            let k = ortho_init(kw, kh, c, m, &mut rng).unwrap();
            let f_in = k.f_in();
            for j in 0..m {
                let norm: f64 = (0..f_in)
                    .map(|i| k.values()[i * m + j] * k.values()[i * m + j])
                    .sum::<f64>()
                    .sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn filter_stack_round_trip_is_bit_exact() {
        let mut rng = Rng::new(10);
        let k = ortho_init(3, 3, 5, 7, &mut rng).unwrap();
        let back = KernelMatrix::from_filter_stack(&k.to_filter_stack()).unwrap();
        assert_eq!(k, back);
    }

    #[test]
    fn msra_scale() {
        // f_in = 2 gives std exactly 1
        let mut rng = Rng::new(11);
        let k = msra_init(1, 1, 2, 1, &mut rng).unwrap();
        assert_eq!(k.f_in(), 2);
        // f_in = 200: empirical variance of 10^4 samples within 10% of 2/200
        let k = msra_init(1, 1, 200, 50, &mut rng).unwrap();
        let n = k.values().len() as f64;
        let var: f64 = k.values().iter().map(|v| v * v).sum::<f64>() / n;
        let want = 2.0 / 200.0;
        assert!((var - want).abs() < 0.1 * want, "var {var} want {want}");
    }

    #[test]
    fn msra_seed_determinism() {
        let a = msra_init(3, 3, 4, 8, &mut Rng::new(99)).unwrap();
        let b = msra_init(3, 3, 4, 8, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn norm_preservation_for_orthonormal_kernels() {
        // ||W d|| == ||d|| for orthonormal W with f_in >= f_out
        let mut rng = Rng::new(12);
        let k = ortho_init(3, 3, 8, 16, &mut rng).unwrap();
        let w = k.as_matrix();
        for _ in 0..50 {
            let delta = tensor::gaussian(&mut rng, &[16, 1], 0.0, 1.0).unwrap();
            let mapped = tensor::matmul(&w, &delta).unwrap();
            let n_in: f64 = delta.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let n_out: f64 = mapped.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n_out - n_in).abs() / n_in < 1e-10);
        }
    }
}
