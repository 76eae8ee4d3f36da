//! Model checkpoints: ISCK container.
//!
//! Layout: magic `ISCK`, version u16 LE, meta length u32 LE, meta TOML
//! (epoch, batches seen, full architecture config), tensor count u32 LE, then
//! per tensor: name (u16 length + UTF-8), dtype u8 (0 = f32, 1 = f64),
//! rank u16, dims u32 each, LE payload.
//!
//! Parameters are stored as f32 under their registry names. Norm running
//! statistics are stored as f64 (`<norm>.rm`, `<norm>.rv`) so reloading a
//! model reproduces its predictions bit for bit. Callers may attach extra f32
//! tensors (optimizer state); unrecognized tensors load back as extras.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::Scalar;

use super::config::DualPathConfig;
use super::model::DualPathModel;

const ISCK_MAGIC: &[u8; 4] = b"ISCK";
const ISCK_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub batches_seen: u64,
    pub config: DualPathConfig,
}

impl CheckpointMeta {
    pub fn ensure_matches(&self, cfg: &DualPathConfig) -> Result<()> {
        if &self.config != cfg {
            return Err(CoreError::Invalid(
                "checkpoint architecture differs from the requested configuration".into(),
            ));
        }
        Ok(())
    }
}

enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

fn write_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], payload: &Payload) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    match payload {
        Payload::F32(v) => {
            out.push(0);
            out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Payload::F64(v) => {
            out.push(1);
            out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
}

/// Base name of a norm layer, shared by its parameters and buffers.
fn norm_base(gamma_name: &str) -> &str {
    gamma_name.strip_suffix(".gamma").unwrap_or(gamma_name)
}

pub fn save_checkpoint<T: Scalar>(
    model: &DualPathModel<T>,
    epoch: u64,
    extras: &[(String, Vec<f32>)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let meta = CheckpointMeta {
        epoch,
        batches_seen: model.batches_seen(),
        config: model.cfg.clone(),
    };
    let meta_toml = toml::to_string(&meta)
        .map_err(|e| CoreError::format(path, format!("meta serialization: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(ISCK_MAGIC);
    out.extend_from_slice(&ISCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_toml.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_toml.as_bytes());

    let params = model.params();
    let norms = model.norms();
    let count = params.len() + 2 * norms.len() + extras.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for p in params {
        let data: Vec<f32> = p.value.data().iter().map(|v| v.to_f32()).collect();
        write_tensor(&mut out, &p.name, p.value.shape(), &Payload::F32(data));
    }
    for n in norms {
        let base = norm_base(&n.gamma.name);
        let ch = [n.running_mean.len()];
        write_tensor(&mut out, &format!("{base}.rm"), &ch, &Payload::F64(n.running_mean.clone()));
        write_tensor(&mut out, &format!("{base}.rv"), &ch, &Payload::F64(n.running_var.clone()));
    }
    for (name, data) in extras {
        write_tensor(&mut out, name, &[data.len()], &Payload::F32(data.clone()));
    }

    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&out).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::format(
                self.path,
                format!("file truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Rebuilds the model the checkpoint describes. Returns the model, its meta,
/// and any extra tensors (optimizer state) in file order.
pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(DualPathModel<T>, CheckpointMeta, Vec<(String, Vec<f32>)>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };

    if r.take(4, "magic")? != ISCK_MAGIC {
        return Err(CoreError::format(path, "bad magic, expected ISCK"));
    }
    let version = r.u16("version")?;
    if version != ISCK_VERSION {
        return Err(CoreError::format(path, format!("unsupported version {version}")));
    }
    let meta_len = r.u32("meta length")? as usize;
    let meta_bytes = r.take(meta_len, "meta")?;
    let meta_str = std::str::from_utf8(meta_bytes)
        .map_err(|_| CoreError::format(path, "meta is not UTF-8"))?;
    let meta: CheckpointMeta = toml::from_str(meta_str)
        .map_err(|e| CoreError::format(path, format!("meta does not parse: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Payload)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| CoreError::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        let rank = r.u16("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor dim")? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = match dtype {
            0 => Payload::F32(
                r.take(n * 4, &name)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => Payload::F64(
                r.take(n * 8, &name)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            d => return Err(CoreError::format(path, format!("tensor {name}: unknown dtype {d}"))),
        };
        tensors.push((name, dims, payload));
    }

    let mut model = DualPathModel::<T>::new(meta.config.clone(), 0)?;
    let mut used = vec![false; tensors.len()];
    let find = |name: &str| tensors.iter().position(|(n, _, _)| n == name);

    for p in model.params_mut() {
        let i = find(&p.name).ok_or_else(|| {
            CoreError::format(path, format!("checkpoint is missing parameter {}", p.name))
        })?;
        let (_, dims, payload) = &tensors[i];
        if dims != p.value.shape() {
            return Err(CoreError::format(
                path,
                format!(
                    "parameter {}: file shape {:?} does not match model shape {:?}",
                    p.name,
                    dims,
                    p.value.shape()
                ),
            ));
        }
        let Payload::F32(data) = payload else {
            return Err(CoreError::format(path, format!("parameter {} is not f32", p.name)));
        };
        for (dst, src) in p.value.data_mut().iter_mut().zip(data) {
            *dst = T::from_f32(*src);
        }
        used[i] = true;
    }
    for norm in model.norms_mut() {
        let base = norm_base(&norm.gamma.name).to_string();
        for (suffix, target_is_mean) in [(".rm", true), (".rv", false)] {
            let name = format!("{base}{suffix}");
            let i = find(&name).ok_or_else(|| {
                CoreError::format(path, format!("checkpoint is missing buffer {name}"))
            })?;
            let (_, _, payload) = &tensors[i];
            let Payload::F64(data) = payload else {
                return Err(CoreError::format(path, format!("buffer {name} is not f64")));
            };
            let dst = if target_is_mean { &mut norm.running_mean } else { &mut norm.running_var };
            if data.len() != dst.len() {
                return Err(CoreError::format(
                    path,
                    format!("buffer {name}: {} channels in file, {} in model", data.len(), dst.len()),
                ));
            }
            dst.copy_from_slice(data);
            used[i] = true;
        }
        norm.batches_seen = meta.batches_seen;
    }

    let extras = tensors
        .into_iter()
        .zip(used)
        .filter(|(_, u)| !u)
        .map(|((name, _, payload), _)| {
            let data = match payload {
                Payload::F32(v) => v,
                Payload::F64(v) => v.into_iter().map(|x| x as f32).collect(),
            };
            (name, data)
        })
        .collect();
    Ok((model, meta, extras))
}
