//! Spatial batch normalization. Statistics are computed per channel over
//! batch and spatial positions with *biased* variance; the backward pass is
//! the closed-form error transformation
//!
//! ```text
//! dX_i = (1 / sqrt(var + eps)) * (delta_i - mean(delta) - x_hat_i/m * sum_j delta_j x_hat_j)
//! ```
//!
//! with `delta_i = dY_i * gamma`, which centers the propagated errors per
//! channel by construction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps,
            momentum,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel population size (batch x spatial) of the last training
    /// forward — the `m` of the backward formula.
    pub fn population(x: &Tensor) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::Dimension(format!(
                "batch norm input must have a channel axis, got shape {:?}",
                s
            )));
        }
        let n = s[0];
        let c = s[1];
        let spatial: usize = s[2..].iter().product();
        Ok((n, c, spatial))
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (n, c, spatial) = Self::population(x)?;
        if c != self.channels() {
            return Err(Error::Dimension(format!(
                "batch norm has {} channels, input has {c}",
                self.channels()
            )));
        }
        let m = n * spatial;
        if training {
            if m < 2 {
                return Err(Error::Domain(format!(
                    "training-mode batch norm needs a per-channel population of at least 2, got {m}"
                )));
            }
            self.forward_train(x, n, c, spatial)
        } else {
            self.cache = None;
            self.forward_infer(x, n, c, spatial)
        }
    }

    fn forward_train(&mut self, x: &Tensor, n: usize, c: usize, spatial: usize) -> Result<Tensor> {
        let m = (n * spatial) as f64;
        let xv = x.data();
        let stride = c * spatial;
        // per-channel mean and biased variance, two passes, ascending (n, s)
        let stats: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mut sum = 0.0;
                for ni in 0..n {
                    let base = ni * stride + ci * spatial;
                    for s in 0..spatial {
                        sum += xv[base + s];
                    }
                }
                let mean = sum / m;
                let mut ss = 0.0;
                for ni in 0..n {
                    let base = ni * stride + ci * spatial;
                    for s in 0..spatial {
                        let d = xv[base + s] - mean;
                        ss += d * d;
                    }
                }
                (mean, ss / m)
            })
            .collect();
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let (mean, var) = stats[ci];
            inv_std[ci] = 1.0 / (var + self.eps).sqrt();
            self.running_mean[ci] = self.momentum * self.running_mean[ci] + (1.0 - self.momentum) * mean;
            self.running_var[ci] = self.momentum * self.running_var[ci] + (1.0 - self.momentum) * var;
        }
        let mut x_hat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        let gamma = &self.gamma;
        let beta = &self.beta;
        x_hat
            .par_chunks_mut(stride)
            .zip(y.par_chunks_mut(stride))
            .enumerate()
            .for_each(|(ni, (xh_img, y_img))| {
                let img = &xv[ni * stride..(ni + 1) * stride];
                for ci in 0..c {
                    let (mean, _) = stats[ci];
                    let is = inv_std[ci];
                    let (g, b) = (gamma[ci], beta[ci]);
                    for s in 0..spatial {
                        let idx = ci * spatial + s;
                        let xh = (img[idx] - mean) * is;
                        xh_img[idx] = xh;
                        y_img[idx] = g * xh + b;
                    }
                }
            });
        self.cache = Some(BnCache {
            x_hat: Tensor::from_vec(x.shape(), x_hat)?,
            inv_std,
        });
        Tensor::from_vec(x.shape(), y)
    }

    fn forward_infer(&self, x: &Tensor, _n: usize, c: usize, spatial: usize) -> Result<Tensor> {
        let xv = x.data();
        let stride = c * spatial;
        let mut y = vec![0.0; xv.len()];
        y.par_chunks_mut(stride).enumerate().for_each(|(ni, y_img)| {
            let img = &xv[ni * stride..(ni + 1) * stride];
            for ci in 0..c {
                let is = 1.0 / (self.running_var[ci] + self.eps).sqrt();
                let (g, b, mu) = (self.gamma[ci], self.beta[ci], self.running_mean[ci]);
                for s in 0..spatial {
                    let idx = ci * spatial + s;
                    y_img[idx] = g * (img[idx] - mu) * is + b;
                }
            }
        });
        Tensor::from_vec(x.shape(), y)
    }

    /// Returns `(dX, dGamma, dBeta)`; requires a training-mode forward on
    /// this state.
    pub fn backward(&self, d_y: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            Error::State("batch norm backward without a cached training forward".into())
        })?;
        if d_y.shape() != cache.x_hat.shape() {
            return Err(Error::Dimension(format!(
                "batch norm backward: upstream shape {:?}, cached forward {:?}",
                d_y.shape(),
                cache.x_hat.shape()
            )));
        }
        let (n, c, spatial) = Self::population(d_y)?;
        let m = (n * spatial) as f64;
        let stride = c * spatial;
        let dyv = d_y.data();
        let xhv = cache.x_hat.data();
        // per-channel reductions: sum(dY), sum(dY * x_hat)
        let sums: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mut s_dy = 0.0;
                let mut s_dy_xh = 0.0;
                for ni in 0..n {
                    let base = ni * stride + ci * spatial;
                    for s in 0..spatial {
                        s_dy += dyv[base + s];
                        s_dy_xh += dyv[base + s] * xhv[base + s];
                    }
                }
                (s_dy, s_dy_xh)
            })
            .collect();
        let d_beta: Vec<f64> = sums.iter().map(|&(s_dy, _)| s_dy).collect();
        let d_gamma: Vec<f64> = sums.iter().map(|&(_, s)| s).collect();
        let mut d_x = vec![0.0; dyv.len()];
        let gamma = &self.gamma;
        let inv_std = &cache.inv_std;
        d_x.par_chunks_mut(stride).enumerate().for_each(|(ni, dx_img)| {
            for ci in 0..c {
                let g = gamma[ci];
                let is = inv_std[ci];
                // delta = dY * gamma; mu_delta = mean(delta); s = sum(delta * x_hat)
                let mu_delta = sums[ci].0 * g / m;
                let s_delta_xh = sums[ci].1 * g;
                for s in 0..spatial {
                    let idx = ni * stride + ci * spatial + s;
                    let delta = dyv[idx] * g;
                    dx_img[ci * spatial + s] =
                        is * (delta - mu_delta - xhv[idx] * s_delta_xh / m);
                }
            }
        });
        Ok((Tensor::from_vec(d_y.shape(), d_x)?, d_gamma, d_beta))
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Normalized activations of the last training forward.
    pub fn cached_x_hat(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.x_hat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gaussian;

    fn channel_moments(t: &Tensor, c: usize, spatial: usize) -> Vec<(f64, f64)> {
        let n = t.shape()[0];
        let m = (n * spatial) as f64;
        (0..c)
            .map(|ci| {
                let vals: Vec<f64> = (0..n)
                    .flat_map(|ni| {
                        (0..spatial).map(move |s| t.data()[(ni * c + ci) * spatial + s])
                    })
                    .collect();
                let mean: f64 = vals.iter().sum::<f64>() / m;
                let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                (mean, var)
            })
            .collect()
    }

    #[test]
    fn already_normalized_is_a_fixed_point() {
        // build per-channel zero-mean unit-variance (biased) data
        let mut rng = Rng::new(1);
        let raw = gaussian(&mut rng, &[8, 3, 4, 4], 0.0, 1.0).unwrap();
        let moments = channel_moments(&raw, 3, 16);
        let mut data = raw.data().to_vec();
        for ni in 0..8 {
            for ci in 0..3 {
                let (mean, var) = moments[ci];
                for s in 0..16 {
                    let idx = (ni * 3 + ci) * 16 + s;
                    data[idx] = (data[idx] - mean) / var.sqrt();
                }
            }
        }
        let x = Tensor::from_vec(&[8, 3, 4, 4], data).unwrap();
        let mut bn = BatchNorm::new(3, 0.0, 0.9);
        let y = bn.forward(&x, true).unwrap();
        let diff = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-10, "fixed point violated by {diff}");
    }

    #[test]
    fn zero_gamma_collapses_to_beta() {
        let mut bn = BatchNorm::new(2, 1e-5, 0.9);
        bn.gamma = vec![0.0, 0.0];
        bn.beta = vec![0.7, -0.3];
        let x = gaussian(&mut Rng::new(2), &[4, 2, 3, 3], 0.0, 2.0).unwrap();
        let y = bn.forward(&x, true).unwrap();
        for ni in 0..4 {
            for ci in 0..2 {
                for s in 0..9 {
                    assert_eq!(y.data()[(ni * 2 + ci) * 9 + s], bn.beta[ci]);
                }
            }
        }
    }

    #[test]
    fn training_output_moment_identity() {
        // output mean = beta, output second central moment = gamma^2 var/(var+eps)
        let mut bn = BatchNorm::new(3, 0.01, 0.9);
        bn.gamma = vec![1.5, 0.5, 2.0];
        bn.beta = vec![0.1, -0.2, 0.3];
        let x = gaussian(&mut Rng::new(3), &[16, 3, 5, 5], 1.0, 2.0).unwrap();
        let in_moments = channel_moments(&x, 3, 25);
        let y = bn.forward(&x, true).unwrap();
        let out_moments = channel_moments(&y, 3, 25);
        for ci in 0..3 {
            let (mean, var) = out_moments[ci];
            let want_var =
                bn.gamma[ci] * bn.gamma[ci] * in_moments[ci].1 / (in_moments[ci].1 + bn.eps);
            assert!((mean - bn.beta[ci]).abs() < 1e-10);
            assert!((var - want_var).abs() < 1e-10);
        }
    }

    #[test]
    fn population_of_one_rejected_in_training() {
        let mut bn = BatchNorm::new(2, 1e-5, 0.9);
        let x = Tensor::zeros(&[1, 2, 1, 1]);
        assert!(bn.forward(&x, true).is_err());
        // inference mode is fine
        assert!(bn.forward(&x, false).is_ok());
    }

    #[test]
    fn backward_constant_upstream_annihilates() {
        let mut bn = BatchNorm::new(2, 1e-5, 0.9);
        let x = gaussian(&mut Rng::new(4), &[8, 2, 4, 4], 0.0, 1.0).unwrap();
        bn.forward(&x, true).unwrap();
        let d_y = Tensor::filled(&[8, 2, 4, 4], 3.25);
        let (dx, _, _) = bn.backward(&d_y).unwrap();
        let worst = dx.data().iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(worst < 1e-12, "constant error should vanish, got {worst}");
    }

    #[test]
    fn backward_output_has_zero_channel_mean() {
        let mut bn = BatchNorm::new(3, 1e-5, 0.9);
        bn.gamma = vec![1.2, 0.8, 1.7];
        let x = gaussian(&mut Rng::new(5), &[8, 3, 4, 4], 0.0, 1.0).unwrap();
        bn.forward(&x, true).unwrap();
        let d_y = gaussian(&mut Rng::new(6), &[8, 3, 4, 4], 0.3, 2.0).unwrap();
        let (dx, _, _) = bn.backward(&d_y).unwrap();
        for (ci, (mean, _)) in channel_moments(&dx, 3, 16).iter().enumerate() {
            assert!(mean.abs() < 1e-10, "channel {ci} mean {mean}");
        }
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let bn = BatchNorm::new(2, 1e-5, 0.9);
        let d_y = Tensor::zeros(&[2, 2, 2, 2]);
        assert!(matches!(
            bn.backward(&d_y),
            Err(crate::error::Error::State(_))
        ));
    }

    #[test]
    fn inference_uses_running_moments() {
        let mut bn = BatchNorm::new(1, 1e-5, 0.0); // momentum 0: running = last batch
        let x = gaussian(&mut Rng::new(7), &[16, 1, 2, 2], 3.0, 2.0).unwrap();
        bn.forward(&x, true).unwrap();
        let y_train_stats = channel_moments(&bn.forward(&x, false).unwrap(), 1, 4)[0];
        // with running == batch stats, inference output is standardized too
        assert!(y_train_stats.0.abs() < 1e-10);
        assert!((y_train_stats.1 - 1.0).abs() < 1e-4);
    }
}
