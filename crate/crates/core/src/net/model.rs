//! Model assembly: two convolution pathways, per-slot pooled-feature gather,
//! and the 1x1 fusion head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::nn::norm::BnCache;
use crate::nn::ops::{
    center_crop, center_crop_backward, concat_channels, dropout, dropout_backward, relu,
    relu_backward, softmax, softmax_cross_entropy, split_channels,
};
use crate::nn::tensor::param_count;
use crate::nn::{BatchNorm, ConvLayer, Mode, Param, ReceptiveField, Scalar, Tensor};
use crate::util::{flatten, next_index};

use super::block::{BlockCache, ResBlock};
use super::config::{DualPathConfig, Geometry, PathSpec};

#[derive(Clone)]
pub struct DualPathModel<T: Scalar> {
    pub cfg: DualPathConfig,
    pub geo: Geometry,
    hr: Pathway<T>,
    lr: Pathway<T>,
    /// Hidden 1x1 fusion convolutions, each preceded by dropout and followed
    /// by relu, then the final classification convolution (no decay).
    fusion: Vec<ConvLayer<T>>,
}

#[derive(Clone)]
struct Pathway<T: Scalar> {
    stem_conv: ConvLayer<T>,
    stem_norm: BatchNorm<T>,
    blocks: Vec<ResBlock<T>>,
}

struct PathCache<T: Scalar> {
    stem_in: Tensor<T>,
    stem_norm: BnCache<T>,
    /// Relu output of the stem, which is also the first block's input.
    stem_out: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
}

impl<T: Scalar> Pathway<T> {
    fn new(name: &str, rank: usize, spec: &PathSpec, rng: &mut impl Rng) -> Self {
        let k3 = vec![3usize; rank];
        let stem_conv = ConvLayer::new(
            &format!("{name}.stem"),
            1,
            spec.stem_channels,
            k3,
            1,
            true,
            rng,
        );
        let stem_norm = BatchNorm::new(&format!("{name}.stem.n"), spec.stem_channels, 1.0);
        let mut blocks = Vec::new();
        let mut in_ch = spec.stem_channels;
        for (i, b) in spec.blocks.iter().enumerate() {
            blocks.push(ResBlock::new(&format!("{name}.b{i}"), rank, in_ch, b, rng));
            in_ch = b.channels;
        }
        Pathway { stem_conv, stem_norm, blocks }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<PathCache<T>>)> {
        let train = mode == Mode::Train;
        let z = self.stem_conv.forward(x)?;
        let (z, stem_bn) = self.stem_norm.forward(&z, mode)?;
        let z = relu(&z);
        let stem_out = z.clone();
        let mut cur = z;
        let mut block_caches = Vec::new();
        for b in &mut self.blocks {
            let (z, cache) = b.forward(&cur, mode)?;
            if let Some(c) = cache {
                block_caches.push(c);
            }
            cur = z;
        }
        let cache = train.then(|| PathCache {
            stem_in: x.clone(),
            stem_norm: stem_bn.unwrap(),
            stem_out,
            blocks: block_caches,
        });
        Ok((cur, cache))
    }

    fn backward(&mut self, cache: &PathCache<T>, grad_out: &Tensor<T>) -> Result<()> {
        let mut g = grad_out.clone();
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(c, &g)?;
        }
        g = relu_backward(&cache.stem_out, &g);
        g = self.stem_norm.backward(&cache.stem_norm, &g)?;
        self.stem_conv.backward(&cache.stem_in, &g)?;
        Ok(())
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![
            &self.stem_conv.w,
            &self.stem_conv.b,
            &self.stem_norm.gamma,
            &self.stem_norm.beta,
        ];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![
            &mut self.stem_conv.w,
            &mut self.stem_conv.b,
            &mut self.stem_norm.gamma,
            &mut self.stem_norm.beta,
        ];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = vec![&mut self.stem_norm];
        for b in &mut self.blocks {
            out.extend(b.norms_mut().iter_mut());
        }
        out
    }

    fn norms(&self) -> Vec<&BatchNorm<T>> {
        let mut out = vec![&self.stem_norm];
        for b in &self.blocks {
            out.extend(b.norms().iter());
        }
        out
    }
}

/// One training batch in tensor form, assembled by the patch extractor.
pub struct TrainBatch<T: Scalar> {
    /// `[n, 1, p_h, ...]` native-resolution patches.
    pub hr: Tensor<T>,
    /// `[n, 1, p_l, ...]` pooled context patches.
    pub lr: Tensor<T>,
    /// Per-slot pooling phase per axis, each in `[0, f)`.
    pub phases: Vec<Vec<usize>>,
    /// Slot-major, row-major labels of the output blocks, length `n * o^rank`.
    pub targets: Vec<u16>,
}

/// Everything the backward pass needs from a training forward.
pub struct TrainCache<T: Scalar> {
    hr: PathCache<T>,
    lr: PathCache<T>,
    hr_feat_spatial: Vec<usize>,
    lr_feat: Tensor<T>,
    phases: Vec<Vec<usize>>,
    fusion_in: Vec<Tensor<T>>,
    fusion_mask: Vec<Option<Vec<bool>>>,
    fusion_relu: Vec<Tensor<T>>,
    grad_logits: Tensor<T>,
}

impl<T: Scalar> DualPathModel<T> {
    pub fn new(cfg: DualPathConfig, seed: u64) -> Result<Self> {
        let geo = cfg.geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hr = Pathway::new("hr", cfg.rank, &cfg.hr, &mut rng);
        let lr = Pathway::new("lr", cfg.rank, &cfg.lr, &mut rng);
        let k1 = vec![1usize; cfg.rank];
        let mut fusion = Vec::new();
        let mut in_ch = cfg.hr.out_channels() + cfg.lr.out_channels();
        for i in 0..cfg.fusion_layers {
            fusion.push(ConvLayer::new(
                &format!("fuse.{i}"),
                in_ch,
                cfg.fusion_channels,
                k1.clone(),
                1,
                true,
                &mut rng,
            ));
            in_ch = cfg.fusion_channels;
        }
        // The classification layer is exempt from weight decay.
        fusion.push(ConvLayer::new(
            "fuse.out",
            in_ch,
            cfg.num_classes as usize,
            k1,
            1,
            false,
            &mut rng,
        ));
        Ok(DualPathModel { cfg, geo, hr, lr, fusion })
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.hr.params();
        out.extend(self.lr.params());
        for c in &self.fusion {
            out.extend([&c.w, &c.b]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.hr.params_mut();
        out.extend(self.lr.params_mut());
        for c in &mut self.fusion {
            out.extend([&mut c.w, &mut c.b]);
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = self.hr.norms_mut();
        out.extend(self.lr.norms_mut());
        out
    }

    pub fn norms(&self) -> Vec<&BatchNorm<T>> {
        let mut out = self.hr.norms();
        out.extend(self.lr.norms());
        out
    }

    /// Batches every norm layer has absorbed; they move in lockstep.
    pub fn batches_seen(&self) -> u64 {
        self.hr.stem_norm.batches_seen
    }

    pub fn set_batches_seen(&mut self, n: u64) {
        for norm in self.norms_mut() {
            norm.batches_seen = n;
        }
    }

    pub fn trainable_parameter_count(&self) -> usize {
        param_count(&self.params())
    }

    /// Gathers per-voxel pooled features: slot `n` with phase `p` reads
    /// feature cell `(p[a] + j[a]) / f` for output voxel `j`.
    fn gather(&self, lr_feat: &Tensor<T>, phases: &[Vec<usize>]) -> Tensor<T> {
        let geo = &self.geo;
        let n = lr_feat.batch();
        let ch = lr_feat.channels();
        let feat_dims = lr_feat.spatial().to_vec();
        let out_dims = geo.per_axis(geo.o);
        let mut shape = vec![n, ch];
        shape.extend_from_slice(&out_dims);
        let mut out = Tensor::zeros(&shape);
        let mut j = vec![0usize; geo.rank];
        let mut u = vec![0usize; geo.rank];
        for slot in 0..n {
            let phase = &phases[slot];
            for c in 0..ch {
                let src = lr_feat.plane(slot, c);
                let dst = out.plane_mut(slot, c);
                j.fill(0);
                for dv in dst.iter_mut() {
                    for a in 0..geo.rank {
                        u[a] = geo.gather_cell(phase[a], j[a]);
                    }
                    *dv = src[flatten(&u, &feat_dims)];
                    next_index(&mut j, &out_dims);
                }
            }
        }
        out
    }

    /// Scatter-add adjoint of [`Self::gather`].
    fn gather_backward(
        &self,
        grad_out: &Tensor<T>,
        feat_dims: &[usize],
        phases: &[Vec<usize>],
    ) -> Tensor<T> {
        let geo = &self.geo;
        let n = grad_out.batch();
        let ch = grad_out.channels();
        let out_dims = grad_out.spatial().to_vec();
        let mut shape = vec![n, ch];
        shape.extend_from_slice(feat_dims);
        let mut grad = Tensor::zeros(&shape);
        let mut j = vec![0usize; geo.rank];
        let mut u = vec![0usize; geo.rank];
        for slot in 0..n {
            let phase = &phases[slot];
            for c in 0..ch {
                let dst = grad.plane_mut(slot, c);
                let src = grad_out.plane(slot, c);
                j.fill(0);
                for sv in src.iter() {
                    for a in 0..geo.rank {
                        u[a] = geo.gather_cell(phase[a], j[a]);
                    }
                    dst[flatten(&u, feat_dims)] += *sv;
                    next_index(&mut j, &out_dims);
                }
            }
        }
        grad
    }

    /// Fusion head. Dropout masks are drawn from `rng` layer by layer in a
    /// fixed order; inference mode draws nothing.
    fn fuse_forward(
        &mut self,
        concat: &Tensor<T>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>, Vec<Option<Vec<bool>>>, Vec<Tensor<T>>)> {
        let p = self.cfg.dropout;
        let mut ins = Vec::new();
        let mut masks = Vec::new();
        let mut relus = Vec::new();
        let mut cur = concat.clone();
        let last = self.fusion.len() - 1;
        for (i, conv) in self.fusion.iter().enumerate() {
            let (dropped, mask) = dropout(&cur, p, mode, rng)?;
            let z = conv.forward(&dropped)?;
            ins.push(dropped);
            masks.push(mask);
            if i < last {
                let z = relu(&z);
                relus.push(z.clone());
                cur = z;
            } else {
                cur = z;
            }
        }
        Ok((cur, ins, masks, relus))
    }

    fn fuse_backward(
        &mut self,
        cache: &TrainCache<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let p = self.cfg.dropout;
        let mut g = grad_logits.clone();
        for i in (0..self.fusion.len()).rev() {
            if i < self.fusion.len() - 1 {
                g = relu_backward(&cache.fusion_relu[i], &g);
            }
            g = self.fusion[i].backward(&cache.fusion_in[i], &g)?;
            g = dropout_backward(cache.fusion_mask[i].as_ref(), p, &g);
        }
        Ok(g)
    }

    fn check_batch(&self, batch: &TrainBatch<T>) -> Result<usize> {
        let geo = &self.geo;
        let n = batch.hr.batch();
        let want_hr: Vec<usize> = geo.per_axis(geo.p_h);
        let want_lr: Vec<usize> = geo.per_axis(geo.p_l);
        if batch.hr.spatial() != want_hr.as_slice() || batch.hr.channels() != 1 {
            return Err(CoreError::Shape(format!(
                "hr batch shape {:?}, expected [n, 1, {want_hr:?}]",
                batch.hr.shape()
            )));
        }
        if batch.lr.spatial() != want_lr.as_slice() || batch.lr.channels() != 1 || batch.lr.batch() != n
        {
            return Err(CoreError::Shape(format!(
                "lr batch shape {:?}, expected [{n}, 1, {want_lr:?}]",
                batch.lr.shape()
            )));
        }
        if batch.phases.len() != n
            || batch
                .phases
                .iter()
                .any(|p| p.len() != geo.rank || p.iter().any(|&v| v >= geo.f))
        {
            return Err(CoreError::Invalid(format!(
                "phases must be {n} per-axis offsets below {}",
                geo.f
            )));
        }
        Ok(n)
    }

    /// Training forward pass with batch statistics and dropout. Returns the
    /// mean cross-entropy, per-voxel probabilities, and the backward cache.
    pub fn forward_train(
        &mut self,
        batch: &TrainBatch<T>,
        rng: &mut impl Rng,
    ) -> Result<(f64, Tensor<T>, TrainCache<T>)> {
        self.check_batch(batch)?;
        let geo = self.geo;
        let (hr_feat, hr_cache) = self.hr.forward(&batch.hr, Mode::Train)?;
        let hr_feat_spatial = hr_feat.spatial().to_vec();
        let hr_out = center_crop(&hr_feat, &geo.per_axis(geo.o))?;
        let (lr_feat, lr_cache) = self.lr.forward(&batch.lr, Mode::Train)?;
        let lr_out = self.gather(&lr_feat, &batch.phases);
        let concat = concat_channels(&hr_out, &lr_out)?;
        let (logits, fusion_in, fusion_mask, fusion_relu) =
            self.fuse_forward(&concat, Mode::Train, rng)?;
        let (loss, probs, grad_logits) = softmax_cross_entropy(&logits, &batch.targets)?;
        let cache = TrainCache {
            hr: hr_cache.unwrap(),
            lr: lr_cache.unwrap(),
            hr_feat_spatial,
            lr_feat,
            phases: batch.phases.clone(),
            fusion_in,
            fusion_mask,
            fusion_relu,
            grad_logits,
        };
        Ok((loss, probs, cache))
    }

    /// Backpropagates from the cached cross-entropy gradient, accumulating
    /// into every parameter's `grad`.
    pub fn backward(&mut self, cache: &TrainCache<T>) -> Result<()> {
        let g_concat = self.fuse_backward(cache, &cache.grad_logits)?;
        let hr_ch = self.cfg.hr.out_channels();
        let (g_hr_out, g_lr_out) = split_channels(&g_concat, hr_ch);
        let g_hr_feat = center_crop_backward(&g_hr_out, &cache.hr_feat_spatial);
        self.hr.backward(&cache.hr, &g_hr_feat)?;
        let g_lr_feat = self.gather_backward(&g_lr_out, cache.lr_feat.spatial(), &cache.phases);
        self.lr.backward(&cache.lr, &g_lr_feat)?;
        Ok(())
    }

    /// Forward pass over an assembled batch without targets. Training mode
    /// applies dropout and batch statistics; inference mode requires the
    /// norms to have absorbed at least one batch.
    pub fn forward_probs(
        &mut self,
        hr: &Tensor<T>,
        lr: &Tensor<T>,
        phases: &[Vec<usize>],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>> {
        let geo = self.geo;
        let (hr_feat, _) = self.hr.forward(hr, mode)?;
        let hr_out = center_crop(&hr_feat, &geo.per_axis(geo.o))?;
        let (lr_feat, _) = self.lr.forward(lr, mode)?;
        let lr_out = self.gather(&lr_feat, phases);
        let concat = concat_channels(&hr_out, &lr_out)?;
        let (logits, _, _, _) = self.fuse_forward(&concat, mode, rng)?;
        Ok(softmax(&logits))
    }

    /// Runs one pathway over an arbitrary input extent (used by whole-image
    /// inference, where the spatial size is the padded image, not a patch).
    pub(super) fn path_forward_infer(
        &mut self,
        which: PathKind,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let path = match which {
            PathKind::Hr => &mut self.hr,
            PathKind::Lr => &mut self.lr,
        };
        let (feat, _) = path.forward(x, Mode::Infer)?;
        Ok(feat)
    }

    pub(super) fn fusion_infer(&mut self, concat: &Tensor<T>) -> Result<Tensor<T>> {
        let mut throwaway = ChaCha8Rng::seed_from_u64(0);
        let (logits, _, _, _) = self.fuse_forward(concat, Mode::Infer, &mut throwaway)?;
        Ok(softmax(&logits))
    }

    /// Receptive field of each pathway in native voxels.
    pub fn receptive_fields(&self) -> (ReceptiveField, ReceptiveField) {
        let k3 = vec![3usize; self.cfg.rank];
        let mut hr = ReceptiveField::new(self.cfg.rank, 1);
        for _ in 0..self.cfg.hr.conv_count() {
            hr.push_conv(&k3, 1);
        }
        let mut lr = ReceptiveField::new(self.cfg.rank, self.geo.f);
        for _ in 0..self.cfg.lr.conv_count() {
            lr.push_conv(&k3, 1);
        }
        (hr, lr)
    }

    pub fn summary(&self) -> String {
        let (hr_rf, lr_rf) = self.receptive_fields();
        let geo = &self.geo;
        format!(
            "dual-path {}d, {} classes, {} trainable parameters\n\
             hr: patch {} -> block {}, receptive field {:?}\n\
             lr: context {} native ({} cells at 1/{}), receptive field {:?}",
            self.cfg.rank,
            self.cfg.num_classes,
            self.trainable_parameter_count(),
            geo.p_h,
            geo.o,
            hr_rf.extent,
            geo.c,
            geo.p_l,
            geo.f,
            lr_rf.extent,
        )
    }
}

#[derive(Clone, Copy)]
pub(super) enum PathKind {
    Hr,
    Lr,
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::super::config::BlockSpec;
    use super::*;
    use crate::nn::gradcheck::central_diff_max_rel_err;

    /// Small geometry for fast tests: f=2, o=3, p_h=9, p_l=8.
    fn tiny() -> DualPathConfig {
        DualPathConfig {
            rank: 2,
            num_classes: 2,
            hr: PathSpec {
                stem_channels: 2,
                blocks: vec![BlockSpec { channels: 3, bottleneck: false }],
            },
            lr: PathSpec {
                stem_channels: 2,
                blocks: vec![BlockSpec { channels: 3, bottleneck: false }],
            },
            downsample: 2,
            out_extent: 3,
            hr_extent: 9,
            lr_extent: None,
            fusion_channels: 4,
            fusion_layers: 1,
            dropout: 0.5,
        }
    }

    fn random_batch(
        cfg: &DualPathConfig,
        n: usize,
        seed: u64,
    ) -> (TrainBatch<f64>, ChaCha8Rng) {
        let geo = cfg.geometry().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hr_shape = vec![n, 1];
        hr_shape.extend(geo.per_axis(geo.p_h));
        let mut lr_shape = vec![n, 1];
        lr_shape.extend(geo.per_axis(geo.p_l));
        let hr = Tensor::from_vec(
            &hr_shape,
            (0..hr_shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let lr = Tensor::from_vec(
            &lr_shape,
            (0..lr_shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let phases: Vec<Vec<usize>> = (0..n)
            .map(|_| (0..geo.rank).map(|_| rng.gen_range(0..geo.f)).collect())
            .collect();
        let targets: Vec<u16> = (0..n * geo.o.pow(geo.rank as u32))
            .map(|_| rng.gen_range(0..cfg.num_classes))
            .collect();
        (TrainBatch { hr, lr, phases, targets }, rng)
    }

    #[test]
    fn default_model_builds_with_expected_receptive_fields() {
        let model = DualPathModel::<f32>::new(DualPathConfig::kidney2d(), 1).unwrap();
        let (hr_rf, lr_rf) = model.receptive_fields();
        assert_eq!(hr_rf.extent, vec![11, 11]);
        assert_eq!(lr_rf.extent, vec![57, 57]);
        assert!(model.trainable_parameter_count() > 0);
        let s = model.summary();
        assert!(s.contains("trainable"), "{s}");
    }

    #[test]
    fn zeroed_classification_layer_gives_exactly_uniform_probabilities() {
        let mut model = DualPathModel::<f32>::new(tiny(), 2).unwrap();
        let last = model.fusion.last_mut().unwrap();
        last.w.value.fill(0.0);
        last.b.value.fill(0.0);
        let cfg = tiny();
        let (batch, _) = random_batch(&cfg, 2, 3);
        let hr = Tensor::from_vec(
            batch.hr.shape(),
            batch.hr.data().iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let lr = Tensor::from_vec(
            batch.lr.shape(),
            batch.lr.data().iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = TrainBatch { hr, lr, phases: batch.phases, targets: batch.targets };
        let (loss, probs, _) = model.forward_train(&b, &mut rng).unwrap();
        assert!(probs.data().iter().all(|&p| p == 0.5), "probs not uniform");
        let expect = (2.0f64).ln();
        assert!((loss - expect).abs() < 1e-6, "loss {loss} vs ln 2 {expect}");
    }

    #[test]
    fn constant_input_yields_spatially_constant_probabilities() {
        let mut model = DualPathModel::<f32>::new(tiny(), 5).unwrap();
        let cfg = tiny();
        let geo = cfg.geometry().unwrap();
        // One training step to populate running statistics.
        let (batch, _) = random_batch(&cfg, 2, 6);
        let hr = Tensor::from_vec(
            batch.hr.shape(),
            batch.hr.data().iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let lr = Tensor::from_vec(
            batch.lr.shape(),
            batch.lr.data().iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let b = TrainBatch { hr, lr, phases: batch.phases.clone(), targets: batch.targets };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        model.forward_train(&b, &mut rng).unwrap();

        let mut hr_shape = vec![1, 1];
        hr_shape.extend(geo.per_axis(geo.p_h));
        let mut lr_shape = vec![1, 1];
        lr_shape.extend(geo.per_axis(geo.p_l));
        let hr_const = Tensor::from_vec(&hr_shape, vec![0.37f32; 81]).unwrap();
        let lr_const = Tensor::from_vec(&lr_shape, vec![0.37f32; 64]).unwrap();
        let probs = model
            .forward_probs(&hr_const, &lr_const, &[vec![1, 0]], Mode::Infer, &mut rng)
            .unwrap();
        let s = probs.spatial_len();
        let pd = probs.data();
        for c in 0..2 {
            let first = pd[c * s];
            assert!(pd[c * s..(c + 1) * s].iter().all(|&v| v == first));
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut model = DualPathModel::<f64>::new(tiny(), 8).unwrap();
        let (batch, mut rng) = random_batch(&tiny(), 3, 9);
        let (_, probs, _) = model.forward_train(&batch, &mut rng).unwrap();
        let s = probs.spatial_len();
        let k = probs.channels();
        for n in 0..probs.batch() {
            for v in 0..s {
                let sum: f64 = (0..k).map(|c| probs.data()[n * k * s + c * s + v]).sum();
                assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
            }
        }
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = DualPathModel::<f32>::new(tiny(), 11).unwrap();
        let b = DualPathModel::<f32>::new(tiny(), 11).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.data(), pb.value.data());
            assert_eq!(pa.decay, pb.decay);
        }
        let c = DualPathModel::<f32>::new(tiny(), 12).unwrap();
        let differs = a
            .params()
            .iter()
            .zip(c.params())
            .any(|(x, y)| x.value.data() != y.value.data());
        assert!(differs);
    }

    #[test]
    fn classification_layer_and_norms_are_decay_exempt() {
        let model = DualPathModel::<f32>::new(tiny(), 13).unwrap();
        for p in model.params() {
            if p.name.starts_with("fuse.out") {
                assert!(!p.decay, "{} should not decay", p.name);
            }
        }
        let norms = model.norms();
        assert!(!norms.is_empty());
        for n in norms {
            assert!(!n.gamma.decay && !n.beta.decay);
        }
        // Ordinary convolution weights do decay.
        let stem = model.params().into_iter().find(|p| p.name == "hr.stem.w").unwrap();
        assert!(stem.decay);
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let mut cfg = tiny();
        cfg.dropout = 0.0;
        let mut model = DualPathModel::<f64>::new(cfg.clone(), 14).unwrap();
        let (batch, _) = random_batch(&cfg, 2, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);

        // A fresh model sits exactly on relu kinks: zero-init gammas silence
        // the residual branches, and relu-clamped stem zeros reach the fusion
        // relu through zero biases. Jitter every parameter so the loss is
        // differentiable at the evaluation point.
        for p in model.params_mut() {
            for v in p.value.data_mut() {
                *v += rng.gen_range(0.05..0.25) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            }
        }

        model.zero_grads();
        let (_, _, cache) = model.forward_train(&batch, &mut rng).unwrap();
        model.backward(&cache).unwrap();
        let mut analytic: Vec<f64> = Vec::new();
        for p in model.params() {
            analytic.extend(p.grad.data());
        }

        let lens: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        let n: usize = lens.iter().sum();
        let locate = move |i: usize| -> (usize, usize) {
            let mut rest = i;
            for (pi, &len) in lens.iter().enumerate() {
                if rest < len {
                    return (pi, rest);
                }
                rest -= len;
            }
            unreachable!("coordinate {i} out of range")
        };
        let mut state = (model, batch);
        let err = central_diff_max_rel_err(
            &mut state,
            n,
            |s, i| {
                let (pi, off) = locate(i);
                s.0.params()[pi].value.data()[off]
            },
            |s, i, v| {
                let (pi, off) = locate(i);
                s.0.params_mut()[pi].value.data_mut()[off] = v;
            },
            |s| {
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let (loss, _, _) = s.0.forward_train(&s.1, &mut r).unwrap();
                loss
            },
            |i| analytic[i],
            1e-4,
            1e-9,
        );
        assert!(err <= 1e-3, "max rel err {err}");
    }

    #[test]
    fn forward_is_deterministic_for_fixed_seeds() {
        let run = || {
            let mut model = DualPathModel::<f32>::new(tiny(), 21).unwrap();
            let (batch, _) = random_batch(&tiny(), 2, 22);
            let hr = Tensor::from_vec(
                batch.hr.shape(),
                batch.hr.data().iter().map(|&v| v as f32).collect(),
            )
            .unwrap();
            let lr = Tensor::from_vec(
                batch.lr.shape(),
                batch.lr.data().iter().map(|&v| v as f32).collect(),
            )
            .unwrap();
            let b = TrainBatch { hr, lr, phases: batch.phases, targets: batch.targets };
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let (loss, probs, _) = model.forward_train(&b, &mut rng).unwrap();
            (loss, probs.into_data())
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(p1, p2);
    }

    #[test]
    fn gather_reads_the_cells_the_geometry_promises() {
        let cfg = tiny();
        let geo = cfg.geometry().unwrap();
        let model = DualPathModel::<f32>::new(cfg, 24).unwrap();
        // Feature plane with cell value = linear index, one slot per phase.
        let g = geo.g;
        let feat_len = g * g;
        let mut shape = vec![2, 1];
        shape.extend([g, g]);
        let data: Vec<f32> = (0..feat_len).map(|v| v as f32).collect();
        let feat = Tensor::from_vec(
            &shape,
            data.iter().cloned().chain(data.iter().cloned()).collect(),
        )
        .unwrap();
        let phases = vec![vec![0, 0], vec![1, 1]];
        let out = model.gather(&feat, &phases);
        for (slot, phase) in phases.iter().enumerate() {
            for j0 in 0..geo.o {
                for j1 in 0..geo.o {
                    let u0 = (phase[0] + j0) / geo.f;
                    let u1 = (phase[1] + j1) / geo.f;
                    let got = out.plane(slot, 0)[j0 * geo.o + j1];
                    assert_eq!(got, (u0 * g + u1) as f32);
                }
            }
        }
    }

    #[test]
    fn three_d_low_res_field_exceeds_high_res_field() {
        let cfg = DualPathConfig {
            rank: 3,
            out_extent: 3,
            hr_extent: 9,
            downsample: 2,
            ..tiny()
        };
        let model = DualPathModel::<f32>::new(cfg.clone(), 30).unwrap();
        let (hr_rf, lr_rf) = model.receptive_fields();
        assert_eq!(hr_rf.extent.len(), 3);
        assert!(lr_rf.extent[0] > hr_rf.extent[0]);
        let geo = cfg.geometry().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut hr_shape = vec![1, 1];
        hr_shape.extend(geo.per_axis(geo.p_h));
        let mut lr_shape = vec![1, 1];
        lr_shape.extend(geo.per_axis(geo.p_l));
        let hr = Tensor::from_vec(
            &hr_shape,
            (0..geo.p_h.pow(3)).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let lr = Tensor::from_vec(
            &lr_shape,
            (0..geo.p_l.pow(3)).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let targets = vec![0u16; geo.o.pow(3)];
        let batch = TrainBatch { hr, lr, phases: vec![vec![0, 1, 0]], targets };
        let mut model = model;
        let (loss, probs, _) = model.forward_train(&batch, &mut rng).unwrap();
        assert!(loss.is_finite());
        assert_eq!(probs.spatial(), &[3, 3, 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn random_valid_configs_forward_cleanly(
            f in 2usize..=4,
            o in 2usize..=5,
            extra in 0usize..=2,
            hr_blocks in 1usize..=2,
            lr_blocks in 1usize..=2,
            seed in 0u64..1000,
        ) {
            let hr = PathSpec {
                stem_channels: 2,
                blocks: (0..hr_blocks).map(|_| BlockSpec { channels: 3, bottleneck: false }).collect(),
            };
            let lr = PathSpec {
                stem_channels: 2,
                blocks: (0..lr_blocks).map(|_| BlockSpec { channels: 3, bottleneck: false }).collect(),
            };
            let n_h = hr.conv_count();
            let cfg = DualPathConfig {
                rank: 2,
                num_classes: 3,
                hr,
                lr,
                downsample: f,
                out_extent: o,
                hr_extent: o + 2 * (n_h + extra),
                lr_extent: None,
                fusion_channels: 4,
                fusion_layers: 1,
                dropout: 0.3,
            };
            let geo = cfg.geometry().unwrap();
            let mut model = DualPathModel::<f32>::new(cfg.clone(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let mut hr_shape = vec![1, 1];
            hr_shape.extend(geo.per_axis(geo.p_h));
            let mut lr_shape = vec![1, 1];
            lr_shape.extend(geo.per_axis(geo.p_l));
            let hr_t = Tensor::from_vec(&hr_shape, (0..geo.p_h * geo.p_h).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
            let lr_t = Tensor::from_vec(&lr_shape, (0..geo.p_l * geo.p_l).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
            let phases = vec![(0..2).map(|_| rng.gen_range(0..geo.f)).collect::<Vec<_>>()];
            let targets: Vec<u16> = (0..geo.o * geo.o).map(|_| rng.gen_range(0..3u16)).collect();
            let batch = TrainBatch { hr: hr_t, lr: lr_t, phases, targets };
            let (loss, probs, _) = model.forward_train(&batch, &mut rng).unwrap();
            prop_assert!(loss.is_finite());
            prop_assert_eq!(probs.shape(), &[1, 3, geo.o, geo.o][..]);
        }
    }
}
