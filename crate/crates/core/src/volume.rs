//! Scalar-grid data model and the `ISVL` on-disk container.
//!
//! Layout of an `.isvl` file, all little-endian:
//!
//! ```text
//! magic   b"ISVL"
//! version u16          (currently 1)
//! rank    u16          (2 or 3)
//! per axis: dim u32, spacing f32   (slowest axis first)
//! dtype   u8           (0 = f32 voxels, 1 = u16 labels)
//! payload row-major raw values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CoreError, Result};

pub const ISVL_MAGIC: &[u8; 4] = b"ISVL";
pub const ISVL_VERSION: u16 = 1;

/// Hounsfield-style clamp bound applied before intensity normalization.
pub const CLAMP_LIMIT: f32 = 1000.0;
/// Constant divisor applied after clamping (dataset standard deviation).
pub const INTENSITY_DIVISOR: f32 = 218.0;

/// An N-dimensional scalar grid with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub dims: Vec<usize>,
    /// Millimeters per voxel along each axis.
    pub spacing: Vec<f32>,
    /// Row-major, slowest axis first.
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(id: impl Into<String>, dims: Vec<usize>, spacing: Vec<f32>, voxels: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || dims.contains(&0) {
            return Err(CoreError::Shape(format!("invalid dims {dims:?}")));
        }
        if spacing.len() != dims.len() || spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(CoreError::Shape(format!(
                "spacing {spacing:?} must be positive and match rank {}",
                dims.len()
            )));
        }
        if voxels.len() != n {
            return Err(CoreError::Shape(format!(
                "voxel count {} does not match dims {:?} (expected {})",
                voxels.len(),
                dims,
                n
            )));
        }
        Ok(Volume {
            id: id.into(),
            dims,
            spacing,
            voxels,
        })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }
}

/// Integer class grid aligned with a [`Volume`]. Class 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub dims: Vec<usize>,
    pub labels: Vec<u16>,
    pub num_classes: u16,
}

impl LabelMap {
    pub fn new(dims: Vec<usize>, labels: Vec<u16>, num_classes: u16) -> Result<Self> {
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(CoreError::Shape(format!(
                "label count {} does not match dims {:?}",
                labels.len(),
                dims
            )));
        }
        if num_classes < 2 {
            return Err(CoreError::Config("num_classes must be at least 2".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CoreError::Invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabelMap {
            dims,
            labels,
            num_classes,
        })
    }

    /// Checks alignment with the paired volume.
    pub fn matches(&self, v: &Volume) -> bool {
        self.dims == v.dims
    }
}

/// Clamp to `[-1000, 1000]`, then divide by 218.
pub fn clamp_normalize(v: &Volume) -> Volume {
    let voxels = v
        .voxels
        .iter()
        .map(|&x| x.clamp(-CLAMP_LIMIT, CLAMP_LIMIT) / INTENSITY_DIVISOR)
        .collect();
    Volume {
        id: v.id.clone(),
        dims: v.dims.clone(),
        spacing: v.spacing.clone(),
        voxels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F32 = 0,
    U16 = 1,
}

fn write_header(out: &mut Vec<u8>, dims: &[usize], spacing: &[f32], dtype: Dtype) {
    out.extend_from_slice(ISVL_MAGIC);
    out.extend_from_slice(&ISVL_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for (d, s) in dims.iter().zip(spacing) {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(dtype as u8);
}

struct Header {
    dims: Vec<usize>,
    spacing: Vec<f32>,
    dtype: u8,
    payload_offset: usize,
}

fn read_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let fail = |reason: &str| CoreError::format(path, reason);
    if bytes.len() < 9 {
        return Err(fail("file shorter than fixed header"));
    }
    if &bytes[..4] != ISVL_MAGIC {
        return Err(fail("bad magic, expected ISVL"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != ISVL_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if rank == 0 || rank > 4 {
        return Err(fail(&format!("unsupported rank {rank}")));
    }
    let axes_len = rank * 8;
    if bytes.len() < 8 + axes_len + 1 {
        return Err(fail("file shorter than axis table"));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut spacing = Vec::with_capacity(rank);
    for a in 0..rank {
        let off = 8 + a * 8;
        let dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let sp = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
        if dim == 0 {
            return Err(fail(&format!("axis {a}: dim is zero")));
        }
        if !(sp > 0.0) || !sp.is_finite() {
            return Err(fail(&format!("axis {a}: spacing {sp} not positive")));
        }
        dims.push(dim as usize);
        spacing.push(sp);
    }
    let dtype = bytes[8 + axes_len];
    Ok(Header {
        dims,
        spacing,
        dtype,
        payload_offset: 8 + axes_len + 1,
    })
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(v.voxels.len() * 4 + 64);
    write_header(&mut out, &v.dims, &v.spacing, Dtype::F32);
    for x in &v.voxels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&out).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let h = read_header(path, &bytes)?;
    if h.dtype != Dtype::F32 as u8 {
        return Err(CoreError::format(
            path,
            format!("dtype {} is not f32 voxels", h.dtype),
        ));
    }
    let n: usize = h.dims.iter().product();
    let payload = &bytes[h.payload_offset..];
    if payload.len() != n * 4 {
        return Err(CoreError::format(
            path,
            format!(
                "payload holds {} voxels but header dims {:?} require {}",
                payload.len() / 4,
                h.dims,
                n
            ),
        ));
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Volume::new(id, h.dims, h.spacing, voxels)
}

pub fn save_labels(l: &LabelMap, spacing: &[f32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(l.labels.len() * 2 + 64);
    write_header(&mut out, &l.dims, spacing, Dtype::U16);
    for x in &l.labels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&out).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>, num_classes: u16) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let h = read_header(path, &bytes)?;
    if h.dtype != Dtype::U16 as u8 {
        return Err(CoreError::format(
            path,
            format!("dtype {} is not u16 labels", h.dtype),
        ));
    }
    let n: usize = h.dims.iter().product();
    let payload = &bytes[h.payload_offset..];
    if payload.len() != n * 2 {
        return Err(CoreError::format(
            path,
            format!(
                "payload holds {} labels but header dims {:?} require {}",
                payload.len() / 2,
                h.dims,
                n
            ),
        ));
    }
    let labels = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabelMap::new(h.dims, labels, num_classes)
}
