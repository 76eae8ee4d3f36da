//! Patch extraction with optional geometric augmentation.
//!
//! A patch pair is cut around an output block starting at `c0`: the native
//! high-resolution patch (`p_h` voxels per axis, `m_h` of them before the
//! block), the pooled context (`c` native voxels starting `f*n_l + phase`
//! before the block, mean-pooled by `f`), and the block's labels.
//!
//! Inference mode reads the native grid directly with replicated borders and
//! the phase `c0 mod f`, which keeps patch outputs bit-identical to
//! whole-image inference. Training mode draws the phase uniformly per axis
//! and, when augmentation is enabled, resamples the volume through an affine
//! map about the block center: rotation, isotropic spacing jitter, and an
//! optional target spacing. Intensities interpolate multilinearly, labels
//! take the nearest voxel, and out-of-range reads replicate the border, so
//! augmented targets always describe the resampled image.
//!
//! Per patch the rng is consumed in a fixed order: phases (one per axis),
//! then rotation angles, then the jitter scale. Inference consumes nothing.
//! With rotation and jitter off and no target spacing override, training
//! takes the same integer path as inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::net::{Geometry, TrainBatch};
use crate::nn::{Mode, Scalar, Tensor};
use crate::util::{multilinear, nearest_u16, next_index, pool_mean, strides, Rotation};
use crate::volume::{LabelMap, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotate: bool,
    /// Half-range of each rotation angle in degrees: one entry for rank 2,
    /// three (about axis 0, 1, 2) for rank 3.
    pub rotation_deg: Vec<f64>,
    pub jitter: bool,
    /// Half-range of the isotropic spacing scale, drawn from `[1-j, 1+j]`.
    pub spacing_jitter: f64,
    /// Physical step between patch cells; `None` samples on the native grid.
    pub target_spacing: Option<Vec<f32>>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate: true,
            rotation_deg: vec![10.0],
            jitter: true,
            spacing_jitter: 0.1,
            target_spacing: None,
        }
    }
}

impl AugmentConfig {
    /// Identity transform: extraction reduces to integer grid reads.
    pub fn none() -> Self {
        AugmentConfig {
            rotate: false,
            jitter: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self, rank: usize) -> Result<()> {
        if self.rotate {
            let want = if rank == 2 { 1 } else { 3 };
            if self.rotation_deg.len() != want {
                return Err(CoreError::Config(format!(
                    "rotation needs {want} angle ranges for rank {rank}, got {:?}",
                    self.rotation_deg
                )));
            }
            if self.rotation_deg.iter().any(|d| !(0.0..=180.0).contains(d)) {
                return Err(CoreError::Config(format!(
                    "rotation ranges {:?} outside [0, 180] degrees",
                    self.rotation_deg
                )));
            }
        }
        if !(0.0..1.0).contains(&self.spacing_jitter) {
            return Err(CoreError::Config(format!(
                "spacing_jitter {} outside [0, 1)",
                self.spacing_jitter
            )));
        }
        if let Some(ts) = &self.target_spacing {
            if ts.len() != rank || ts.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(CoreError::Config(format!(
                    "target_spacing {ts:?} must hold {rank} positive finite entries"
                )));
            }
        }
        Ok(())
    }
}

/// One extracted patch with its context, labels, and pooling phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    /// Native patch, `p_h` per axis, row-major.
    pub hr: Vec<f32>,
    /// Pooled context, `p_l` cells per axis; kept in f64 exactly as pooled.
    pub lr: Vec<f64>,
    /// Labels of the output block, `o` per axis; empty without a label map.
    pub targets: Vec<u16>,
    /// Pooling phase per axis, each in `[0, f)`.
    pub phase: Vec<usize>,
}

/// Affine map from block-centered patch cells to source voxel coordinates:
/// cells scale to physical units by `step * scale`, rotate, then divide by
/// the source spacing.
struct PatchTransform {
    rot: Rotation,
    scale: f64,
    step: Vec<f64>,
    spacing: Vec<f64>,
    /// Source coordinate of the block center, `c0 + (o-1)/2`.
    center: Vec<f64>,
}

impl PatchTransform {
    fn source(&self, rel: &[f64], src: &mut [f64]) {
        let rank = rel.len();
        let mut phys = [0f64; 8];
        for a in 0..rank {
            phys[a] = rel[a] * self.step[a] * self.scale;
        }
        let mut rot = [0f64; 8];
        self.rot.apply(&phys[..rank], &mut rot[..rank]);
        for a in 0..rank {
            src[a] = self.center[a] + rot[a] / self.spacing[a];
        }
    }
}

/// Reads an `extent`-cube starting at `start` (may be negative), replicating
/// the border exactly like padded whole-image inference.
fn gather_clamped(dims: &[usize], data: &[f32], start: &[isize], extent: usize) -> Vec<f32> {
    let rank = dims.len();
    let st = strides(dims);
    let out_dims = vec![extent; rank];
    let mut out = vec![0f32; extent.pow(rank as u32)];
    let mut idx = vec![0usize; rank];
    for v in out.iter_mut() {
        let mut off = 0usize;
        for a in 0..rank {
            let s = (start[a] + idx[a] as isize).clamp(0, dims[a] as isize - 1) as usize;
            off += s * st[a];
        }
        *v = data[off];
        next_index(&mut idx, &out_dims);
    }
    out
}

/// Samples an `extent`-cube through `t`; grid index `i` maps to the relative
/// cell `i - offset[a]` per axis.
fn resample_f32(dims: &[usize], data: &[f32], t: &PatchTransform, extent: usize, offset: &[f64]) -> Vec<f32> {
    let rank = dims.len();
    let out_dims = vec![extent; rank];
    let mut out = vec![0f32; extent.pow(rank as u32)];
    let mut idx = vec![0usize; rank];
    let mut rel = [0f64; 8];
    let mut src = [0f64; 8];
    for v in out.iter_mut() {
        for a in 0..rank {
            rel[a] = idx[a] as f64 - offset[a];
        }
        t.source(&rel[..rank], &mut src[..rank]);
        *v = multilinear(dims, data, &src[..rank]);
        next_index(&mut idx, &out_dims);
    }
    out
}

fn resample_labels(dims: &[usize], labels: &[u16], t: &PatchTransform, extent: usize, offset: &[f64]) -> Vec<u16> {
    let rank = dims.len();
    let out_dims = vec![extent; rank];
    let mut out = vec![0u16; extent.pow(rank as u32)];
    let mut idx = vec![0usize; rank];
    let mut rel = [0f64; 8];
    let mut src = [0f64; 8];
    for v in out.iter_mut() {
        for a in 0..rank {
            rel[a] = idx[a] as f64 - offset[a];
        }
        t.source(&rel[..rank], &mut src[..rank]);
        *v = nearest_u16(dims, labels, &src[..rank]);
        next_index(&mut idx, &out_dims);
    }
    out
}

fn read_block_labels(labels: &LabelMap, c0: &[usize], o: usize) -> Vec<u16> {
    let rank = labels.dims.len();
    let st = strides(&labels.dims);
    let out_dims = vec![o; rank];
    let mut out = vec![0u16; o.pow(rank as u32)];
    let mut idx = vec![0usize; rank];
    for v in out.iter_mut() {
        let mut off = 0usize;
        for a in 0..rank {
            off += (c0[a] + idx[a]) * st[a];
        }
        *v = labels.labels[off];
        next_index(&mut idx, &out_dims);
    }
    out
}

/// Extracts the patch pair whose output block starts at `c0`.
pub fn extract_patch_pair(
    vol: &Volume,
    labels: Option<&LabelMap>,
    c0: &[usize],
    geo: &Geometry,
    aug: &AugmentConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<PatchPair> {
    let rank = geo.rank;
    if vol.dims.len() != rank || c0.len() != rank {
        return Err(CoreError::Shape(format!(
            "volume rank {} and block start {c0:?} must both have rank {rank}",
            vol.dims.len()
        )));
    }
    if let Some(l) = labels {
        if !l.matches(vol) {
            return Err(CoreError::Shape(format!(
                "label dims {:?} do not match volume dims {:?}",
                l.dims, vol.dims
            )));
        }
    }
    for a in 0..rank {
        if c0[a] + geo.o > vol.dims[a] {
            return Err(CoreError::Shape(format!(
                "output block at {c0:?} leaks from dims {:?} along axis {a}",
                vol.dims
            )));
        }
    }
    aug.validate(rank)?;

    let phase: Vec<usize> = match mode {
        Mode::Infer => c0.iter().map(|&c| c % geo.f).collect(),
        Mode::Train => (0..rank).map(|_| rng.gen_range(0..geo.f)).collect(),
    };
    let identity = match mode {
        Mode::Infer => true,
        Mode::Train => {
            !aug.rotate
                && !aug.jitter
                && aug.target_spacing.as_ref().is_none_or(|ts| ts == &vol.spacing)
        }
    };

    if identity {
        let hr_start: Vec<isize> = c0.iter().map(|&c| c as isize - geo.m_h as isize).collect();
        let hr = gather_clamped(&vol.dims, &vol.voxels, &hr_start, geo.p_h);
        let ctx_start: Vec<isize> = (0..rank)
            .map(|a| c0[a] as isize - geo.context_offset(phase[a]) as isize)
            .collect();
        let ctx = gather_clamped(&vol.dims, &vol.voxels, &ctx_start, geo.c);
        let (_, lr) = pool_mean(&geo.per_axis(geo.c), &ctx, geo.f);
        let targets = labels.map(|l| read_block_labels(l, c0, geo.o)).unwrap_or_default();
        return Ok(PatchPair { hr, lr, targets, phase });
    }

    let angles: Vec<f64> = if aug.rotate {
        aug.rotation_deg.iter().map(|&d| rng.gen_range(-d..=d).to_radians()).collect()
    } else {
        vec![0.0; if rank == 2 { 1 } else { 3 }]
    };
    let scale = if aug.jitter {
        rng.gen_range(1.0 - aug.spacing_jitter..=1.0 + aug.spacing_jitter)
    } else {
        1.0
    };
    let spacing: Vec<f64> = vol.spacing.iter().map(|&s| f64::from(s)).collect();
    let step: Vec<f64> = match &aug.target_spacing {
        Some(ts) => ts.iter().map(|&s| f64::from(s)).collect(),
        None => spacing.clone(),
    };
    let half = (geo.o as f64 - 1.0) / 2.0;
    let t = PatchTransform {
        rot: Rotation::from_angles(&angles),
        scale,
        step,
        spacing,
        center: c0.iter().map(|&c| c as f64 + half).collect(),
    };

    let hr_offset = vec![geo.m_h as f64 + half; rank];
    let hr = resample_f32(&vol.dims, &vol.voxels, &t, geo.p_h, &hr_offset);
    let ctx_offset: Vec<f64> = phase.iter().map(|&p| geo.context_offset(p) as f64 + half).collect();
    let ctx = resample_f32(&vol.dims, &vol.voxels, &t, geo.c, &ctx_offset);
    let (_, lr) = pool_mean(&geo.per_axis(geo.c), &ctx, geo.f);
    let block_offset = vec![half; rank];
    let targets = labels
        .map(|l| resample_labels(&l.dims, &l.labels, &t, geo.o, &block_offset))
        .unwrap_or_default();
    Ok(PatchPair { hr, lr, targets, phase })
}

/// Stacks patch pairs into the tensors a training step consumes.
pub fn assemble_batch<T: Scalar>(pairs: &[PatchPair], geo: &Geometry) -> Result<TrainBatch<T>> {
    if pairs.is_empty() {
        return Err(CoreError::Config("cannot assemble an empty batch".into()));
    }
    let rank = geo.rank;
    let hr_len = geo.p_h.pow(rank as u32);
    let lr_len = geo.p_l.pow(rank as u32);
    let t_len = geo.o.pow(rank as u32);
    let n = pairs.len();
    let mut hr = Vec::with_capacity(n * hr_len);
    let mut lr = Vec::with_capacity(n * lr_len);
    let mut targets = Vec::with_capacity(n * t_len);
    let mut phases = Vec::with_capacity(n);
    for (i, p) in pairs.iter().enumerate() {
        if p.hr.len() != hr_len || p.lr.len() != lr_len || p.targets.len() != t_len {
            return Err(CoreError::Shape(format!(
                "patch {i} has lengths hr {} / lr {} / targets {}, expected {hr_len} / {lr_len} / {t_len}",
                p.hr.len(),
                p.lr.len(),
                p.targets.len()
            )));
        }
        if p.phase.len() != rank || p.phase.iter().any(|&ph| ph >= geo.f) {
            return Err(CoreError::Shape(format!(
                "patch {i} phase {:?} invalid for downsample {}",
                p.phase, geo.f
            )));
        }
        hr.extend(p.hr.iter().map(|&v| T::from_f32(v)));
        lr.extend(p.lr.iter().map(|&v| T::from_f64(v)));
        targets.extend_from_slice(&p.targets);
        phases.push(p.phase.clone());
    }
    let mut hr_shape = vec![n, 1];
    hr_shape.extend(geo.per_axis(geo.p_h));
    let mut lr_shape = vec![n, 1];
    lr_shape.extend(geo.per_axis(geo.p_l));
    Ok(TrainBatch {
        hr: Tensor::from_vec(&hr_shape, hr)?,
        lr: Tensor::from_vec(&lr_shape, lr)?,
        phases,
        targets,
    })
}
