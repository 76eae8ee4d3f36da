//! Batch normalization over `(batch, spatial)` per channel.
//!
//! Statistics accumulate in double precision regardless of the element type;
//! running statistics use momentum 0.9 and biased variance throughout.

use crate::error::{CoreError, Result};
use crate::exec;
use crate::nn::tensor::{Param, Scalar, Tensor};
use crate::nn::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub batches_seen: u64,
    channels: usize,
}

/// Values the backward pass needs from a training-mode forward.
#[derive(Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
    count: usize,
}

impl<T: Scalar> BatchNorm<T> {
    /// `gamma_init` is 1 for ordinary placement, 0 for the final norm of a
    /// residual branch (so the block starts as the identity map).
    pub fn new(name: &str, channels: usize, gamma_init: f64) -> Self {
        let mut gamma = Tensor::zeros(&[channels]);
        gamma.fill(T::from_f64(gamma_init));
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), gamma, false),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels]), false),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            batches_seen: 0,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        if x.channels() != self.channels {
            return Err(CoreError::Shape(format!(
                "batchnorm expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        match mode {
            Mode::Train => {
                let (y, cache) = self.forward_train(x);
                Ok((y, Some(cache)))
            }
            Mode::Infer => Ok((self.forward_infer(x)?, None)),
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let batch = x.batch();
        let spatial = x.spatial_len();
        let count = batch * spatial;
        let channels = self.channels;

        let stats: Vec<(f64, f64)> = exec::map_indexed(channels, |c| {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for b in 0..batch {
                for &v in x.plane(b, c) {
                    let v = v.to_f64();
                    sum += v;
                    sum_sq += v * v;
                }
            }
            let mean = sum / count as f64;
            let var = (sum_sq / count as f64 - mean * mean).max(0.0);
            (mean, var)
        });

        let mut inv_std = Vec::with_capacity(channels);
        for (c, &(mean, var)) in stats.iter().enumerate() {
            self.running_mean[c] = BN_MOMENTUM * self.running_mean[c] + (1.0 - BN_MOMENTUM) * mean;
            self.running_var[c] = BN_MOMENTUM * self.running_var[c] + (1.0 - BN_MOMENTUM) * var;
            inv_std.push(1.0 / (var + BN_EPS).sqrt());
        }
        self.batches_seen += 1;

        let mut xhat = Tensor::zeros(x.shape());
        exec::for_each_chunk_mut(xhat.data_mut(), spatial, |plane_idx, out| {
            let b = plane_idx / channels;
            let c = plane_idx % channels;
            let mean = T::from_f64(stats[c].0);
            let scale = T::from_f64(inv_std[c]);
            for (o, &v) in out.iter_mut().zip(x.plane(b, c)) {
                *o = (v - mean) * scale;
            }
        });

        let mut y = Tensor::zeros(x.shape());
        let gd = self.gamma.value.data();
        let bd = self.beta.value.data();
        exec::for_each_chunk_mut(y.data_mut(), spatial, |plane_idx, out| {
            let b = plane_idx / channels;
            let c = plane_idx % channels;
            let g = gd[c];
            let s = bd[c];
            for (o, &h) in out.iter_mut().zip(xhat.plane(b, c)) {
                *o = g.mul_add(h, s);
            }
        });

        (y, BnCache { xhat, inv_std, count })
    }

    fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.batches_seen == 0 {
            return Err(CoreError::Invalid(
                "batchnorm inference requested before any batch statistics were accumulated".into(),
            ));
        }
        let spatial = x.spatial_len();
        let channels = self.channels;
        let gd = self.gamma.value.data();
        let bd = self.beta.value.data();
        let mut y = Tensor::zeros(x.shape());
        exec::for_each_chunk_mut(y.data_mut(), spatial, |plane_idx, out| {
            let b = plane_idx / channels;
            let c = plane_idx % channels;
            let mean = T::from_f64(self.running_mean[c]);
            let scale = T::from_f64(1.0 / (self.running_var[c] + BN_EPS).sqrt()) * gd[c];
            let shift = bd[c];
            for (o, &v) in out.iter_mut().zip(x.plane(b, c)) {
                *o = scale.mul_add(v - mean, shift);
            }
        });
        Ok(y)
    }

    /// Training-mode backward; accumulates gamma/beta gradients.
    pub fn backward(&mut self, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.shape() != cache.xhat.shape() {
            return Err(CoreError::Shape(format!(
                "batchnorm backward: grad shape {:?} does not match cached {:?}",
                grad_out.shape(),
                cache.xhat.shape()
            )));
        }
        let batch = grad_out.batch();
        let spatial = grad_out.spatial_len();
        let channels = self.channels;
        let m = cache.count as f64;

        let sums: Vec<(f64, f64)> = exec::map_indexed(channels, |c| {
            let mut s1 = 0.0f64;
            let mut s2 = 0.0f64;
            for b in 0..batch {
                for (&g, &h) in grad_out.plane(b, c).iter().zip(cache.xhat.plane(b, c)) {
                    let g = g.to_f64();
                    s1 += g;
                    s2 += g * h.to_f64();
                }
            }
            (s1, s2)
        });

        for c in 0..channels {
            let gb = self.beta.grad.data_mut();
            gb[c] += T::from_f64(sums[c].0);
            let gg = self.gamma.grad.data_mut();
            gg[c] += T::from_f64(sums[c].1);
        }

        let gd = self.gamma.value.data();
        let mut grad_x = Tensor::zeros(grad_out.shape());
        exec::for_each_chunk_mut(grad_x.data_mut(), spatial, |plane_idx, out| {
            let b = plane_idx / channels;
            let c = plane_idx % channels;
            let scale = gd[c] * T::from_f64(cache.inv_std[c]);
            let mean_g = T::from_f64(sums[c].0 / m);
            let mean_gh = T::from_f64(sums[c].1 / m);
            let gp = grad_out.plane(b, c);
            let hp = cache.xhat.plane(b, c);
            for i in 0..out.len() {
                out[i] = scale * (gp[i] - mean_g - hp[i] * mean_gh);
            }
        });
        Ok(grad_x)
    }
}
