//! Small shared helpers: grid indexing, deterministic seed derivation, and
//! multilinear interpolation over raw grids.

/// Row-major strides (slowest axis first) for the given dims.
pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Linear index of a multi-index under row-major layout.
pub fn flatten(idx: &[usize], dims: &[usize]) -> usize {
    debug_assert_eq!(idx.len(), dims.len());
    let mut lin = 0usize;
    for (i, d) in idx.iter().zip(dims) {
        debug_assert!(i < d);
        lin = lin * d + i;
    }
    lin
}

/// Inverse of [`flatten`].
pub fn unflatten(mut lin: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0usize; dims.len()];
    for axis in (0..dims.len()).rev() {
        idx[axis] = lin % dims[axis];
        lin /= dims[axis];
    }
    idx
}

/// Advances a row-major multi-index counter; returns false after the last
/// index wraps around to all zeros.
pub fn next_index(idx: &mut [usize], dims: &[usize]) -> bool {
    for axis in (0..dims.len()).rev() {
        idx[axis] += 1;
        if idx[axis] < dims[axis] {
            return true;
        }
        idx[axis] = 0;
    }
    false
}

/// Start of a block of `extent` voxels whose (floor) center sits at `center`.
pub fn block_start(center: &[usize], extent: usize) -> Vec<usize> {
    center
        .iter()
        .map(|&c| {
            debug_assert!(c >= extent / 2);
            c - extent / 2
        })
        .collect()
}

/// SplitMix64 step. Used to derive independent seeds from a master seed
/// without consuming state from any live RNG stream.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed for a (master, epoch, batch) coordinate.
pub fn batch_seed(master: u64, epoch: u64, batch: u64) -> u64 {
    splitmix64(splitmix64(master ^ (epoch << 20)) ^ batch)
}

/// Multilinear interpolation of a row-major scalar grid at a fractional
/// coordinate (one entry per axis). Out-of-range coordinates clamp to the
/// edge, i.e. reads replicate the border.
pub fn multilinear(dims: &[usize], data: &[f32], coord: &[f64]) -> f32 {
    let rank = dims.len();
    debug_assert_eq!(coord.len(), rank);
    let mut lo = [0usize; 8];
    let mut hi = [0usize; 8];
    let mut frac = [0f64; 8];
    for a in 0..rank {
        let max = (dims[a] - 1) as f64;
        let c = coord[a].clamp(0.0, max);
        let f = c.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        frac[a] = c - f;
    }
    let strides = strides(dims);
    let mut acc = 0f64;
    for corner in 0..(1usize << rank) {
        let mut w = 1f64;
        let mut off = 0usize;
        for a in 0..rank {
            if corner >> a & 1 == 1 {
                w *= frac[a];
                off += hi[a] * strides[a];
            } else {
                w *= 1.0 - frac[a];
                off += lo[a] * strides[a];
            }
        }
        if w != 0.0 {
            acc += w * data[off] as f64;
        }
    }
    acc as f32
}

/// Nearest-neighbor sample of an integer grid; rounds half away from zero
/// and clamps to the edge.
pub fn nearest_u16(dims: &[usize], data: &[u16], coord: &[f64]) -> u16 {
    let strides = strides(dims);
    let mut off = 0usize;
    for a in 0..dims.len() {
        let i = (coord[a].round().max(0.0) as usize).min(dims[a] - 1);
        off += i * strides[a];
    }
    data[off]
}

/// Mean pooling with cube windows of edge `f`; every dim must divide by `f`.
///
/// Accumulates each window in f64, iterating voxels in row-major order. Patch
/// extraction and whole-image inference both pool through this one function,
/// which is what makes their pooled cells bit-identical.
pub fn pool_mean(dims: &[usize], data: &[f32], f: usize) -> (Vec<usize>, Vec<f64>) {
    let rank = dims.len();
    assert!(dims.iter().all(|&d| d % f == 0), "dims {dims:?} not divisible by {f}");
    let pooled_dims: Vec<usize> = dims.iter().map(|&d| d / f).collect();
    let st = strides(dims);
    let window = vec![f; rank];
    let count = f.pow(rank as u32) as f64;
    let mut out = vec![0.0f64; pooled_dims.iter().product()];
    let mut cell = vec![0usize; rank];
    let mut w = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut acc = 0.0f64;
        w.fill(0);
        loop {
            let mut off = 0usize;
            for a in 0..rank {
                off += (cell[a] * f + w[a]) * st[a];
            }
            acc += data[off] as f64;
            if !next_index(&mut w, &window) {
                break;
            }
        }
        *o = acc / count;
        next_index(&mut cell, &pooled_dims);
    }
    (pooled_dims, out)
}

/// Pads a grid by edge replication: `lo[a]` extra cells before and `hi[a]`
/// after axis `a`.
pub fn pad_replicate(dims: &[usize], data: &[f32], lo: &[usize], hi: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = dims.len();
    let out_dims: Vec<usize> = (0..rank).map(|a| dims[a] + lo[a] + hi[a]).collect();
    let st = strides(dims);
    let mut out = vec![0.0f32; out_dims.iter().product()];
    let mut idx = vec![0usize; rank];
    for v in out.iter_mut() {
        let mut off = 0usize;
        for a in 0..rank {
            let src = idx[a].saturating_sub(lo[a]).min(dims[a] - 1);
            off += src * st[a];
        }
        *v = data[off];
        next_index(&mut idx, &out_dims);
    }
    (out_dims, out)
}

/// Orthonormal rotation over coordinates in dims order.
///
/// 3D composes about-axis rotations in (axis 0, axis 1, axis 2) order, i.e.
/// the in-plane rotation first; 2D is the single plane rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    rank: usize,
    /// Row-major rank x rank matrix.
    m: Vec<f64>,
}

fn mat_mul(rank: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rank * rank];
    for i in 0..rank {
        for j in 0..rank {
            let mut acc = 0.0;
            for k in 0..rank {
                acc += a[i * rank + k] * b[k * rank + j];
            }
            out[i * rank + j] = acc;
        }
    }
    out
}

impl Rotation {
    pub fn identity(rank: usize) -> Self {
        let mut m = vec![0.0; rank * rank];
        for i in 0..rank {
            m[i * rank + i] = 1.0;
        }
        Rotation { rank, m }
    }

    /// 2D rotation by `theta` radians in the (axis 0, axis 1) plane.
    pub fn rot2(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Rotation {
            rank: 2,
            m: vec![c, -s, s, c],
        }
    }

    /// 3D rotation composed as about-axis-0, then axis 1, then axis 2.
    pub fn rot3(a0: f64, a1: f64, a2: f64) -> Self {
        let (s0, c0) = a0.sin_cos();
        let (s1, c1) = a1.sin_cos();
        let (s2, c2) = a2.sin_cos();
        let r0 = vec![1.0, 0.0, 0.0, 0.0, c0, -s0, 0.0, s0, c0];
        let r1 = vec![c1, 0.0, s1, 0.0, 1.0, 0.0, -s1, 0.0, c1];
        let r2 = vec![c2, -s2, 0.0, s2, c2, 0.0, 0.0, 0.0, 1.0];
        Rotation {
            rank: 3,
            m: mat_mul(3, &mat_mul(3, &r0, &r1), &r2),
        }
    }

    pub fn from_angles(angles: &[f64]) -> Self {
        match angles.len() {
            1 => Rotation::rot2(angles[0]),
            3 => Rotation::rot3(angles[0], angles[1], angles[2]),
            n => panic!("unsupported angle count {n}"),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        for i in 0..self.rank {
            let mut acc = 0.0;
            for j in 0..self.rank {
                acc += self.m[i * self.rank + j] * v[j];
            }
            out[i] = acc;
        }
    }

    /// Applies the inverse (= transpose for orthonormal matrices).
    pub fn apply_inverse(&self, v: &[f64], out: &mut [f64]) {
        for i in 0..self.rank {
            let mut acc = 0.0;
            for j in 0..self.rank {
                acc += self.m[j * self.rank + i] * v[j];
            }
            out[i] = acc;
        }
    }
}
