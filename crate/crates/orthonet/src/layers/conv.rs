//! 2-D convolution (cross-correlation, no kernel flip, no bias) by patch
//! flattening: forward is `patches * W` with `W` the `f_in x f_out` kernel
//! matrix, backward recovers `dW = patches^T * dOut` and `dX` by the
//! column-to-image scatter.

use crate::error::{Error, Result};
use crate::init::KernelMatrix;
use crate::tensor::{self, Tensor};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: KernelMatrix,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn new(kernel: KernelMatrix, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Domain("stride must be >= 1".into()));
        }
        Ok(ConvLayer {
            kernel,
            stride,
            pad,
        })
    }

    /// Output spatial extents for an input of `h x w`; errors unless
    /// `(in + 2*pad - k) / stride + 1` is a positive integer.
    pub fn output_extents(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kw, kh, _, _) = self.kernel.dims();
        let oh = out_extent(h, kh, self.pad, self.stride)?;
        let ow = out_extent(w, kw, self.pad, self.stride)?;
        Ok((oh, ow))
    }

    /// `x: [N, C, H, W] -> [N, M, H', W']`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = unpack_nchw(x)?;
        let (kw, kh, kc, m) = self.kernel.dims();
        if c != kc {
            return Err(Error::Dimension(format!(
                "conv expects {kc} input channels, got {c}"
            )));
        }
        let (oh, ow) = self.output_extents(h, w)?;
        let patches = im2col(x, kh, kw, self.stride, self.pad, oh, ow);
        let y_mat = tensor::matmul(&patches, &self.kernel.as_matrix())?;
        Ok(rows_to_nchw(&y_mat, n, m, oh, ow))
    }

    /// Gradients of `sum(dOut .* forward(x))` with respect to the input and
    /// the kernel matrix. `dW` comes back in `f_in x f_out` layout.
    pub fn backward(&self, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = unpack_nchw(x)?;
        let (kw, kh, kc, m) = self.kernel.dims();
        if c != kc {
            return Err(Error::Dimension(format!(
                "conv expects {kc} input channels, got {c}"
            )));
        }
        let (oh, ow) = self.output_extents(h, w)?;
        if d_out.shape() != [n, m, oh, ow] {
            return Err(Error::Dimension(format!(
                "conv backward: upstream shape {:?}, expected {:?}",
                d_out.shape(),
                [n, m, oh, ow]
            )));
        }
        let d_out_mat = nchw_to_rows(d_out);
        let patches = im2col(x, kh, kw, self.stride, self.pad, oh, ow);
        let d_w = tensor::matmul_tn(&patches, &d_out_mat)?;
        let w_t = tensor::transpose(&self.kernel.as_matrix())?;
        let d_patches = tensor::matmul(&d_out_mat, &w_t)?;
        let d_x = col2im(&d_patches, n, c, h, w, kh, kw, self.stride, self.pad, oh, ow);
        Ok((d_x, d_w))
    }
}

fn out_extent(input: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::Dimension(format!(
            "output extent ({input} + 2*{pad} - {k}) / {stride} + 1 is not a positive integer"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn unpack_nchw(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "expected NCHW tensor, got shape {:?}",
            s
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Patch matrix `[(N*H'*W') x (C*kh*kw)]`; row order is `(n, oy, ox)`
/// nested, column order matches the kernel's flat row index.
fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let f_in = c * kh * kw;
    let rows_per_image = oh * ow;
    let mut out = vec![0.0; n * rows_per_image * f_in];
    let xv = x.data();
    out.par_chunks_mut(rows_per_image * f_in)
        .enumerate()
        .for_each(|(ni, block)| {
            let x_img = &xv[ni * c * h * w..(ni + 1) * c * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut block[(oy * ow + ox) * f_in..(oy * ow + ox + 1) * f_in];
                    for ci in 0..c {
                        let plane = &x_img[ci * h * w..(ci + 1) * h * w];
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let dst = &mut row[(ci * kh + ky) * kw..(ci * kh + ky + 1) * kw];
                            if iy < 0 || iy >= h as isize {
                                continue; // stays zero (padding)
                            }
                            let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            for (kx, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::from_vec(&[n * rows_per_image, f_in], out).expect("im2col size")
}

/// Scatter-add patch gradients back onto the input image; inverse map of
/// [`im2col`]. Images are independent, so the per-image parallel loop is
/// deterministic.
#[allow(clippy::too_many_arguments)]
fn col2im(
    d_patches: &Tensor,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let f_in = c * kh * kw;
    let rows_per_image = oh * ow;
    let mut out = vec![0.0; n * c * h * w];
    let dv = d_patches.data();
    out.par_chunks_mut(c * h * w).enumerate().for_each(|(ni, img)| {
        let block = &dv[ni * rows_per_image * f_in..(ni + 1) * rows_per_image * f_in];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &block[(oy * ow + ox) * f_in..(oy * ow + ox + 1) * f_in];
                for ci in 0..c {
                    let plane = &mut img[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &row[(ci * kh + ky) * kw..(ci * kh + ky + 1) * kw];
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (kx, &v) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[n, c, h, w], out).expect("col2im size")
}

/// `[(N*H'*W') x M]` row matrix -> `[N, M, H', W']`.
fn rows_to_nchw(rows: &Tensor, n: usize, m: usize, oh: usize, ow: usize) -> Tensor {
    let spatial = oh * ow;
    let mut out = vec![0.0; n * m * spatial];
    let rv = rows.data();
    out.par_chunks_mut(m * spatial).enumerate().for_each(|(ni, img)| {
        for s in 0..spatial {
            let row = &rv[(ni * spatial + s) * m..(ni * spatial + s + 1) * m];
            for (mi, &v) in row.iter().enumerate() {
                img[mi * spatial + s] = v;
            }
        }
    });
    Tensor::from_vec(&[n, m, oh, ow], out).expect("rows_to_nchw size")
}

/// `[N, M, H', W'] -> [(N*H'*W') x M]`, inverse of [`rows_to_nchw`].
fn nchw_to_rows(x: &Tensor) -> Tensor {
    let (n, m, oh, ow) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let spatial = oh * ow;
    let mut out = vec![0.0; n * spatial * m];
    let xv = x.data();
    out.par_chunks_mut(spatial * m).enumerate().for_each(|(ni, block)| {
        let img = &xv[ni * m * spatial..(ni + 1) * m * spatial];
        for s in 0..spatial {
            for mi in 0..m {
                block[s * m + mi] = img[mi * spatial + s];
            }
        }
    });
    Tensor::from_vec(&[n * spatial, m], out).expect("nchw_to_rows size")
}
