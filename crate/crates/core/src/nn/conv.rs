//! Valid (unpadded) cross-correlation with hand-written backward.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::exec;
use crate::nn::tensor::{glorot_init, Param, Scalar, Tensor};
use crate::util::{flatten, next_index, strides};

/// Convolution layer: weights `[out_ch, in_ch, kernel...]`, bias `[out_ch]`.
///
/// Output extent per axis is `(in - k)/stride + 1`; no padding is ever
/// applied, so stacking layers shrinks the spatial block deterministically.
#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    pub w: Param<T>,
    pub b: Param<T>,
    pub kernel: Vec<usize>,
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: Vec<usize>,
        stride: usize,
        decay: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(stride >= 1 && in_ch >= 1 && out_ch >= 1);
        assert!(kernel.iter().all(|&k| k >= 1 && k % 2 == 1));
        let kvol: usize = kernel.iter().product();
        let mut shape = vec![out_ch, in_ch];
        shape.extend_from_slice(&kernel);
        let w = glorot_init(&shape, in_ch * kvol, out_ch * kvol, rng);
        ConvLayer {
            w: Param::new(format!("{name}.w"), w, decay),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[out_ch]), decay),
            kernel,
            stride,
            in_ch,
            out_ch,
        }
    }

    pub fn out_spatial(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != self.kernel.len() {
            return Err(CoreError::Shape(format!(
                "conv expects rank {} input, got {:?}",
                self.kernel.len(),
                input
            )));
        }
        input
            .iter()
            .zip(&self.kernel)
            .enumerate()
            .map(|(axis, (&i, &k))| {
                if i < k {
                    Err(CoreError::Shape(format!(
                        "axis {axis}: input extent {i} smaller than kernel {k}"
                    )))
                } else {
                    Ok((i - k) / self.stride + 1)
                }
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels() != self.in_ch {
            return Err(CoreError::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_ch,
                x.channels()
            )));
        }
        let out_sp = self.out_spatial(x.spatial())?;
        let mut shape = vec![x.batch(), self.out_ch];
        shape.extend_from_slice(&out_sp);
        let mut y = Tensor::zeros(&shape);

        let in_strides = strides(x.spatial());
        let kvol: usize = self.kernel.iter().product();
        let plane_len: usize = out_sp.iter().product();
        let rank = self.kernel.len();
        let w_out = out_sp[rank - 1];
        let oc_count = self.out_ch;
        let in_ch = self.in_ch;
        let stride = self.stride;
        let kernel = &self.kernel;
        let wd = self.w.value.data();
        let bd = self.b.value.data();
        let out_sp = &out_sp;

        exec::for_each_chunk_mut(y.data_mut(), plane_len, |plane_idx, out| {
            let b = plane_idx / oc_count;
            let oc = plane_idx % oc_count;
            out.fill(bd[oc]);
            let mut outer = vec![0usize; rank - 1];
            let mut ko = vec![0usize; rank];
            for ic in 0..in_ch {
                let xp = x.plane(b, ic);
                let w_base = (oc * in_ch + ic) * kvol;
                ko.fill(0);
                loop {
                    let wv = wd[w_base + flatten(&ko, kernel)];
                    outer.fill(0);
                    let mut out_off = 0usize;
                    loop {
                        let mut in_off = ko[rank - 1];
                        for a in 0..rank - 1 {
                            in_off += (outer[a] * stride + ko[a]) * in_strides[a];
                        }
                        let dst = &mut out[out_off..out_off + w_out];
                        if stride == 1 {
                            let src = &xp[in_off..in_off + w_out];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = wv.mul_add(*s, *d);
                            }
                        } else {
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d = wv.mul_add(xp[in_off + i * stride], *d);
                            }
                        }
                        out_off += w_out;
                        if !next_index(&mut outer, &out_sp[..rank - 1]) {
                            break;
                        }
                    }
                    if !next_index(&mut ko, kernel) {
                        break;
                    }
                }
            }
        });
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let out_sp = self.out_spatial(x.spatial())?;
        let mut expect = vec![x.batch(), self.out_ch];
        expect.extend_from_slice(&out_sp);
        if grad_out.shape() != expect.as_slice() {
            return Err(CoreError::Shape(format!(
                "conv backward: grad shape {:?} does not match forward output {:?}",
                grad_out.shape(),
                expect
            )));
        }

        let in_strides = strides(x.spatial());
        let kvol: usize = self.kernel.iter().product();
        let rank = self.kernel.len();
        let w_out = out_sp[rank - 1];
        let batch = x.batch();
        let in_ch = self.in_ch;
        let oc_count = self.out_ch;
        let stride = self.stride;
        let kernel = self.kernel.clone();
        let outer_sp = out_sp[..rank - 1].to_vec();

        // grad_b: one fixed-order reduction per output channel.
        let gb_add: Vec<T> = exec::map_indexed(oc_count, |oc| {
            let mut acc = T::ZERO;
            for b in 0..batch {
                for &g in grad_out.plane(b, oc) {
                    acc += g;
                }
            }
            acc
        });
        for (g, a) in self.b.grad.data_mut().iter_mut().zip(gb_add) {
            *g += a;
        }

        // grad_w: parallel over output channels; each owns a disjoint slice.
        {
            let kernel = &kernel;
            let outer_sp = &outer_sp;
            let in_strides = &in_strides;
            exec::for_each_chunk_mut(self.w.grad.data_mut(), in_ch * kvol, |oc, gw| {
                let mut ko = vec![0usize; rank];
                let mut outer = vec![0usize; rank - 1];
                for ic in 0..in_ch {
                    let gw_base = ic * kvol;
                    ko.fill(0);
                    loop {
                        let mut acc = T::ZERO;
                        for b in 0..batch {
                            let xp = x.plane(b, ic);
                            let gp = grad_out.plane(b, oc);
                            outer.fill(0);
                            let mut g_off = 0usize;
                            loop {
                                let mut in_off = ko[rank - 1];
                                for a in 0..rank - 1 {
                                    in_off += (outer[a] * stride + ko[a]) * in_strides[a];
                                }
                                let g_row = &gp[g_off..g_off + w_out];
                                if stride == 1 {
                                    let x_row = &xp[in_off..in_off + w_out];
                                    for (g, xv) in g_row.iter().zip(x_row) {
                                        acc = g.mul_add(*xv, acc);
                                    }
                                } else {
                                    for (i, g) in g_row.iter().enumerate() {
                                        acc = g.mul_add(xp[in_off + i * stride], acc);
                                    }
                                }
                                g_off += w_out;
                                if !next_index(&mut outer, outer_sp) {
                                    break;
                                }
                            }
                        }
                        gw[gw_base + flatten(&ko, kernel)] += acc;
                        if !next_index(&mut ko, kernel) {
                            break;
                        }
                    }
                }
            });
        }

        // grad_x: parallel over (batch, in_channel) planes.
        let mut grad_x = Tensor::zeros(x.shape());
        let in_plane_len = x.spatial_len();
        {
            let kernel = &kernel;
            let outer_sp = &outer_sp;
            let in_strides = &in_strides;
            let wd = self.w.value.data();
            exec::for_each_chunk_mut(grad_x.data_mut(), in_plane_len, |plane_idx, gx| {
                let b = plane_idx / in_ch;
                let ic = plane_idx % in_ch;
                let mut ko = vec![0usize; rank];
                let mut outer = vec![0usize; rank - 1];
                for oc in 0..oc_count {
                    let gp = grad_out.plane(b, oc);
                    let w_base = (oc * in_ch + ic) * kvol;
                    ko.fill(0);
                    loop {
                        let wv = wd[w_base + flatten(&ko, kernel)];
                        outer.fill(0);
                        let mut g_off = 0usize;
                        loop {
                            let mut in_off = ko[rank - 1];
                            for a in 0..rank - 1 {
                                in_off += (outer[a] * stride + ko[a]) * in_strides[a];
                            }
                            let g_row = &gp[g_off..g_off + w_out];
                            if stride == 1 {
                                let dst = &mut gx[in_off..in_off + w_out];
                                for (d, g) in dst.iter_mut().zip(g_row) {
                                    *d = wv.mul_add(*g, *d);
                                }
                            } else {
                                for (i, g) in g_row.iter().enumerate() {
                                    let d = &mut gx[in_off + i * stride];
                                    *d = wv.mul_add(*g, *d);
                                }
                            }
                            g_off += w_out;
                            if !next_index(&mut outer, outer_sp) {
                                break;
                            }
                        }
                        if !next_index(&mut ko, kernel) {
                            break;
                        }
                    }
                }
            });
        }
        Ok(grad_x)
    }
}
