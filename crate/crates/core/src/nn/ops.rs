//! Stateless layer operations: relu, dropout, softmax with cross-entropy,
//! and the structural crop/concat ops used by the fusion stage.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::Mode;
use crate::util::{next_index, strides};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = v.maximum(T::ZERO);
    }
    y
}

/// `y` is the forward output; positions with `y > 0` pass the gradient.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
        if !(*yv > T::ZERO) {
            *gv = T::ZERO;
        }
    }
    g
}

/// Inverted dropout: kept units scale by `1/(1-p)` so inference is identity.
///
/// Training with `p = 0` is an identity fast path consuming no rng draws.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Option<Vec<bool>>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CoreError::Config(format!("dropout probability {p} outside [0,1]")));
    }
    if mode == Mode::Infer || p == 0.0 {
        return Ok((x.clone(), None));
    }
    if p >= 1.0 {
        return Err(CoreError::Config(
            "dropout probability 1 in training would zero all activations".into(),
        ));
    }
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mut y = x.clone();
    let mask: Vec<bool> = y
        .data_mut()
        .iter_mut()
        .map(|v| {
            let keep = rng.gen::<f64>() >= p;
            *v = if keep { *v * scale } else { T::ZERO };
            keep
        })
        .collect();
    Ok((y, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(
    mask: Option<&Vec<bool>>,
    p: f64,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let Some(mask) = mask else {
        return grad_out.clone();
    };
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mut g = grad_out.clone();
    for (gv, &keep) in g.data_mut().iter_mut().zip(mask) {
        *gv = if keep { *gv * scale } else { T::ZERO };
    }
    g
}

/// Probabilities below this are flushed to exact zero. Subnormal floats cost
/// two orders of magnitude extra on x86, and a confident model's softmax
/// tails otherwise seed the whole backward pass with them; 1e-20 is far
/// below anything training or evaluation can distinguish from zero.
const PROB_FLUSH: f64 = 1e-20;

/// Per-voxel softmax over the channel axis of `[batch, K, spatial...]`.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.channels();
    let s = logits.spatial_len();
    let batch = logits.batch();
    let mut probs = Tensor::zeros(logits.shape());
    let ld = logits.data();
    let pd = probs.data_mut();
    let mut vals = vec![T::ZERO; k];
    for n in 0..batch {
        for v in 0..s {
            let base = n * k * s + v;
            let mut m = ld[base];
            for c in 1..k {
                m = m.maximum(ld[base + c * s]);
            }
            let mut sum = T::ZERO;
            let floor = T::from_f64(PROB_FLUSH);
            for (c, val) in vals.iter_mut().enumerate() {
                let e = (ld[base + c * s] - m).exp();
                let e = if e < floor { T::ZERO } else { e };
                *val = e;
                sum += e;
            }
            for (c, val) in vals.iter().enumerate() {
                pd[base + c * s] = *val / sum;
            }
        }
    }
    probs
}

/// Mean cross-entropy over all voxels of the output block.
///
/// Returns `(loss, probs, grad_logits)` with `grad = (p - onehot)/count`;
/// the loss accumulates in double precision.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u16],
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    let k = logits.channels();
    let s = logits.spatial_len();
    let batch = logits.batch();
    let count = batch * s;
    if targets.len() != count {
        return Err(CoreError::Shape(format!(
            "targets length {} does not match {} output voxels",
            targets.len(),
            count
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= k) {
        return Err(CoreError::Invalid(format!(
            "target label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax(logits);
    let pd = probs.data();
    let inv = T::from_f64(1.0 / count as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    let mut loss = 0.0f64;
    for n in 0..batch {
        for v in 0..s {
            let base = n * k * s + v;
            let t = targets[n * s + v] as usize;
            loss -= pd[base + t * s].to_f64().max(PROB_FLUSH).ln();
            for c in 0..k {
                let p = pd[base + c * s];
                let onehot = if c == t { T::ONE } else { T::ZERO };
                gd[base + c * s] = (p - onehot) * inv;
            }
        }
    }
    Ok((loss / count as f64, probs, grad))
}

/// Centered spatial crop; offsets are `(in - target)/2` per axis.
pub fn center_crop<T: Scalar>(x: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    let in_sp = x.spatial();
    if target.len() != in_sp.len() {
        return Err(CoreError::Shape(format!(
            "crop rank {} does not match input rank {}",
            target.len(),
            in_sp.len()
        )));
    }
    for (a, (&t, &i)) in target.iter().zip(in_sp).enumerate() {
        if t > i {
            return Err(CoreError::Shape(format!(
                "axis {a}: crop extent {t} exceeds input extent {i}"
            )));
        }
    }
    let offsets: Vec<usize> = target.iter().zip(in_sp).map(|(&t, &i)| (i - t) / 2).collect();
    let mut shape = vec![x.batch(), x.channels()];
    shape.extend_from_slice(target);
    let mut y = Tensor::zeros(&shape);

    let rank = target.len();
    let in_strides = strides(in_sp);
    let w = target[rank - 1];
    let spatial_out: usize = target.iter().product();
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let xp = x.plane(b, c);
            let yp = y.plane_mut(b, c);
            let mut outer = vec![0usize; rank - 1];
            let mut out_off = 0usize;
            loop {
                let mut in_off = offsets[rank - 1];
                for a in 0..rank - 1 {
                    in_off += (outer[a] + offsets[a]) * in_strides[a];
                }
                yp[out_off..out_off + w].copy_from_slice(&xp[in_off..in_off + w]);
                out_off += w;
                if !next_index(&mut outer, &target[..rank - 1]) {
                    break;
                }
            }
            debug_assert_eq!(out_off, spatial_out);
        }
    }
    Ok(y)
}

/// Scatters a cropped-block gradient back into a zero tensor of the
/// pre-crop spatial extent.
pub fn center_crop_backward<T: Scalar>(grad_out: &Tensor<T>, in_spatial: &[usize]) -> Tensor<T> {
    let target = grad_out.spatial().to_vec();
    let rank = target.len();
    let offsets: Vec<usize> = target
        .iter()
        .zip(in_spatial)
        .map(|(&t, &i)| (i - t) / 2)
        .collect();
    let mut shape = vec![grad_out.batch(), grad_out.channels()];
    shape.extend_from_slice(in_spatial);
    let mut gx = Tensor::zeros(&shape);
    let in_strides = strides(in_spatial);
    let w = target[rank - 1];
    for b in 0..grad_out.batch() {
        for c in 0..grad_out.channels() {
            let gp = grad_out.plane(b, c);
            let xp = gx.plane_mut(b, c);
            let mut outer = vec![0usize; rank - 1];
            let mut out_off = 0usize;
            loop {
                let mut in_off = offsets[rank - 1];
                for a in 0..rank - 1 {
                    in_off += (outer[a] + offsets[a]) * in_strides[a];
                }
                xp[in_off..in_off + w].copy_from_slice(&gp[out_off..out_off + w]);
                out_off += w;
                if !next_index(&mut outer, &target[..rank - 1]) {
                    break;
                }
            }
        }
    }
    gx
}

/// Channel concatenation of two tensors with equal batch and spatial dims.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.batch() != b.batch() || a.spatial() != b.spatial() {
        return Err(CoreError::Shape(format!(
            "concat operands disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut shape = vec![a.batch(), a.channels() + b.channels()];
    shape.extend_from_slice(a.spatial());
    let mut y = Tensor::zeros(&shape);
    for n in 0..a.batch() {
        for c in 0..a.channels() {
            y.plane_mut(n, c).copy_from_slice(a.plane(n, c));
        }
        for c in 0..b.channels() {
            y.plane_mut(n, a.channels() + c).copy_from_slice(b.plane(n, c));
        }
    }
    Ok(y)
}

/// Splits a concat gradient back into the two operand gradients.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let second = grad.channels() - first;
    let mut sa = vec![grad.batch(), first];
    sa.extend_from_slice(grad.spatial());
    let mut sb = vec![grad.batch(), second];
    sb.extend_from_slice(grad.spatial());
    let mut ga = Tensor::zeros(&sa);
    let mut gb = Tensor::zeros(&sb);
    for n in 0..grad.batch() {
        for c in 0..first {
            ga.plane_mut(n, c).copy_from_slice(grad.plane(n, c));
        }
        for c in 0..second {
            gb.plane_mut(n, c).copy_from_slice(grad.plane(n, first + c));
        }
    }
    (ga, gb)
}
