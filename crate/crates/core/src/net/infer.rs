//! Whole-image inference.
//!
//! The image is padded by edge replication, both pathways run fully
//! convolutionally over the padded grid, and each output voxel reads its two
//! feature vectors by index arithmetic:
//!
//! * left pad `a = f * n_l`, a multiple of `f`, so the single pooling grid of
//!   the padded image aligns with every patch pooling grid (a patch at block
//!   start `c0` has phase `c0 mod f`, and `c0 + a - phase` is a grid line);
//! * right pad sized so the last output voxel still has both features, then
//!   rounded up to keep the padded extent divisible by `f`;
//! * output voxel `x` reads high-res feature `x + a - n_h` and pooled feature
//!   `(x + a)/f - n_l`.
//!
//! Because valid convolutions accumulate each output element independently in
//! a fixed order, a patch forward pass and this global pass produce bit-equal
//! probabilities; tiling the image is exact, not approximate.

use crate::error::{CoreError, Result};
use crate::nn::{Scalar, Tensor};
use crate::util::{next_index, pad_replicate, pool_mean, strides};
use crate::volume::Volume;

use super::config::Geometry;
use super::model::{DualPathModel, PathKind};

/// Per-voxel class probabilities, voxel-major: `data[v * k + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub dims: Vec<usize>,
    pub num_classes: u16,
    pub data: Vec<f32>,
}

impl ProbMap {
    pub fn probs(&self, v: usize) -> &[f32] {
        let k = self.num_classes as usize;
        &self.data[v * k..(v + 1) * k]
    }
}

/// Replication padding for an image of `dims`: `(left, right_per_axis)`.
/// The left pad is `f * n_l` on every axis.
pub fn inference_padding(geo: &Geometry, dims: &[usize]) -> (usize, Vec<usize>) {
    let a = geo.f * geo.n_l;
    let right = dims
        .iter()
        .map(|&d| {
            let mut b = geo.f * ((d - 1 + a) / geo.f + geo.n_l + 1) - d - a;
            while b < geo.n_h {
                b += geo.f;
            }
            b
        })
        .collect();
    (a, right)
}

pub fn full_image_inference<T: Scalar>(
    model: &mut DualPathModel<T>,
    vol: &Volume,
) -> Result<ProbMap> {
    let geo = model.geo;
    let rank = geo.rank;
    if vol.dims.len() != rank {
        return Err(CoreError::Shape(format!(
            "volume {} has rank {}, model expects {rank}",
            vol.id,
            vol.dims.len()
        )));
    }
    let dims = vol.dims.clone();
    let k = model.cfg.num_classes as usize;

    let (a, right) = inference_padding(&geo, &dims);
    let lo = vec![a; rank];
    let (padded_dims, padded) = pad_replicate(&dims, &vol.voxels, &lo, &right);

    // High-resolution pathway over the whole padded image.
    let mut hr_shape = vec![1usize, 1];
    hr_shape.extend_from_slice(&padded_dims);
    let hr_in = Tensor::from_vec(&hr_shape, padded.iter().map(|&v| T::from_f32(v)).collect())?;
    let hr_feat = model.path_forward_infer(PathKind::Hr, &hr_in)?;
    let hr_dims = hr_feat.spatial().to_vec();

    // Low-resolution pathway over the pooled grid (phase 0 of padded coords).
    let (pooled_dims, pooled) = pool_mean(&padded_dims, &padded, geo.f);
    let mut lr_shape = vec![1usize, 1];
    lr_shape.extend_from_slice(&pooled_dims);
    let lr_in = Tensor::from_vec(&lr_shape, pooled.iter().map(|&v| T::from_f64(v)).collect())?;
    let lr_feat = model.path_forward_infer(PathKind::Lr, &lr_in)?;
    let lr_dims = lr_feat.spatial().to_vec();

    // Assemble per-voxel feature maps of the original extent.
    let c_h = hr_feat.channels();
    let c_l = lr_feat.channels();
    let mut concat_shape = vec![1usize, c_h + c_l];
    concat_shape.extend_from_slice(&dims);
    let mut concat = Tensor::zeros(&concat_shape);
    let hr_st = strides(&hr_dims);
    let lr_st = strides(&lr_dims);
    let out_len: usize = dims.iter().product();

    let mut idx = vec![0usize; rank];
    let mut hr_off = vec![0usize; out_len];
    let mut lr_off = vec![0usize; out_len];
    for v in 0..out_len {
        let mut ho = 0usize;
        let mut lo_ = 0usize;
        for ax in 0..rank {
            ho += (idx[ax] + a - geo.n_h) * hr_st[ax];
            lo_ += ((idx[ax] + a) / geo.f - geo.n_l) * lr_st[ax];
        }
        hr_off[v] = ho;
        lr_off[v] = lo_;
        next_index(&mut idx, &dims);
    }
    for c in 0..c_h {
        let src = hr_feat.plane(0, c);
        let dst = concat.plane_mut(0, c);
        for (d, &off) in dst.iter_mut().zip(&hr_off) {
            *d = src[off];
        }
    }
    for c in 0..c_l {
        let src = lr_feat.plane(0, c);
        let dst = concat.plane_mut(0, c_h + c);
        for (d, &off) in dst.iter_mut().zip(&lr_off) {
            *d = src[off];
        }
    }

    let probs = model.fusion_infer(&concat)?;
    probs.check_finite("full-image inference probabilities")?;

    // Channel-major to voxel-major.
    let pd = probs.data();
    let mut data = vec![0.0f32; out_len * k];
    for c in 0..k {
        let plane = &pd[c * out_len..(c + 1) * out_len];
        for (v, &p) in plane.iter().enumerate() {
            data[v * k + c] = p.to_f32();
        }
    }
    Ok(ProbMap { dims, num_classes: model.cfg.num_classes, data })
}
