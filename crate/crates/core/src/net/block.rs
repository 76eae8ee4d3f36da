//! Residual blocks over valid convolutions.
//!
//! The branch is conv -> norm -> relu -> ... -> conv -> norm with the final
//! norm's scale initialized to zero, so a fresh block is exactly the identity
//! (plus projection) and the residual add changes nothing bit-wise. The
//! shortcut center-crops the input to the shrunken branch extent and applies
//! a plain 1x1 convolution only when the channel count changes. No activation
//! follows the add.

use rand::Rng;

use crate::error::Result;
use crate::nn::norm::BnCache;
use crate::nn::ops::{center_crop, center_crop_backward, relu, relu_backward};
use crate::nn::{BatchNorm, ConvLayer, Mode, Param, Scalar, Tensor};

use super::config::BlockSpec;

#[derive(Clone)]
pub struct ResBlock<T: Scalar> {
    convs: Vec<ConvLayer<T>>,
    norms: Vec<BatchNorm<T>>,
    proj: Option<ConvLayer<T>>,
    /// Cells the branch consumes per side (2 standard, 1 bottleneck).
    pub crop: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

pub struct BlockCache<T: Scalar> {
    /// `xs[i]` is the input to conv `i`; `xs[0]` is the block input. For
    /// `i >= 1` it is also the output of relu `i-1`.
    xs: Vec<Tensor<T>>,
    norms: Vec<BnCache<T>>,
    /// Cropped input feeding the projection, when one exists.
    shortcut_in: Option<Tensor<T>>,
    in_spatial: Vec<usize>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new(name: &str, rank: usize, in_ch: usize, spec: &BlockSpec, rng: &mut impl Rng) -> Self {
        let out = spec.channels;
        let k3 = vec![3usize; rank];
        let k1 = vec![1usize; rank];
        let (convs, norms, crop) = if spec.bottleneck {
            let mid = (out / 4).max(1);
            (
                vec![
                    ConvLayer::new(&format!("{name}.c0"), in_ch, mid, k1.clone(), 1, true, rng),
                    ConvLayer::new(&format!("{name}.c1"), mid, mid, k3, 1, true, rng),
                    ConvLayer::new(&format!("{name}.c2"), mid, out, k1.clone(), 1, true, rng),
                ],
                vec![
                    BatchNorm::new(&format!("{name}.n0"), mid, 1.0),
                    BatchNorm::new(&format!("{name}.n1"), mid, 1.0),
                    BatchNorm::new(&format!("{name}.n2"), out, 0.0),
                ],
                1,
            )
        } else {
            (
                vec![
                    ConvLayer::new(&format!("{name}.c0"), in_ch, out, k3.clone(), 1, true, rng),
                    ConvLayer::new(&format!("{name}.c1"), out, out, k3, 1, true, rng),
                ],
                vec![
                    BatchNorm::new(&format!("{name}.n0"), out, 1.0),
                    BatchNorm::new(&format!("{name}.n1"), out, 0.0),
                ],
                2,
            )
        };
        let proj = (in_ch != out)
            .then(|| ConvLayer::new(&format!("{name}.proj"), in_ch, out, k1, 1, true, rng));
        ResBlock { convs, norms, proj, crop, in_ch, out_ch: out }
    }

    pub fn out_spatial(&self, input: &[usize]) -> Vec<usize> {
        input.iter().map(|&d| d - 2 * self.crop).collect()
    }

    /// In training mode the returned cache is present; inference returns none.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<BlockCache<T>>)> {
        let train = mode == Mode::Train;
        let in_spatial = x.spatial().to_vec();
        let mut xs = Vec::new();
        let mut bn_caches = Vec::new();
        if train {
            xs.push(x.clone());
        }
        let last = self.convs.len() - 1;
        let mut cur = None::<Tensor<T>>;
        for i in 0..self.convs.len() {
            let input = cur.as_ref().unwrap_or(x);
            let z = self.convs[i].forward(input)?;
            let (z, bn) = self.norms[i].forward(&z, mode)?;
            if let Some(bn) = bn {
                bn_caches.push(bn);
            }
            let z = if i < last { relu(&z) } else { z };
            if train && i < last {
                xs.push(z.clone());
            }
            cur = Some(z);
        }
        let branch = cur.unwrap();

        let cropped = center_crop(x, branch.spatial())?;
        let (shortcut, shortcut_in) = match &self.proj {
            Some(p) => {
                let s = p.forward(&cropped)?;
                (s, train.then_some(cropped))
            }
            None => (cropped, None),
        };

        let mut y = branch;
        for (yv, sv) in y.data_mut().iter_mut().zip(shortcut.data()) {
            *yv += *sv;
        }
        let cache = train.then_some(BlockCache { xs, norms: bn_caches, shortcut_in, in_spatial });
        Ok((y, cache))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &BlockCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        for i in (0..self.convs.len()).rev() {
            g = self.norms[i].backward(&cache.norms[i], &g)?;
            g = self.convs[i].backward(&cache.xs[i], &g)?;
            if i > 0 {
                g = relu_backward(&cache.xs[i], &g);
            }
        }
        let gs = match (&mut self.proj, &cache.shortcut_in) {
            (Some(p), Some(s_in)) => p.backward(s_in, grad_out)?,
            _ => grad_out.clone(),
        };
        let gsx = center_crop_backward(&gs, &cache.in_spatial);
        let mut gx = g;
        for (gv, sv) in gx.data_mut().iter_mut().zip(gsx.data()) {
            *gv += *sv;
        }
        Ok(gx)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            out.extend([&c.w, &c.b, &n.gamma, &n.beta]);
        }
        if let Some(p) = &self.proj {
            out.extend([&p.w, &p.b]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            out.extend([&mut c.w, &mut c.b, &mut n.gamma, &mut n.beta]);
        }
        if let Some(p) = &mut self.proj {
            out.extend([&mut p.w, &mut p.b]);
        }
        out
    }

    pub fn norms(&self) -> &[BatchNorm<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [BatchNorm<T>] {
        &mut self.norms
    }
}
