//! Adaptive patch sampling driven by per-image error maps.
//!
//! Each batch slot fixes an image, then repeatedly proposes a center: a class
//! drawn uniformly among the classes present in that image, and a voxel drawn
//! uniformly within the class. The proposal is accepted iff `E > u - epsilon`
//! with `u ~ U[0,1)` and `E` the image's error map at the proposed voxel, so
//! the acceptance probability is `min(1, E + epsilon)`. Fresh maps are all
//! ones and accept everything; once maps refresh to `1 - p(true class)`,
//! sampling concentrates on voxels the network still gets wrong, while
//! `epsilon` keeps every voxel reachable. After [`SamplerConfig::max_attempts`]
//! rejections the best proposal seen (largest error) is accepted and flagged.
//!
//! `epsilon >= 1` accepts every proposal before the acceptance variate is
//! drawn, which collapses the scheme bit-for-bit onto plain class-balanced
//! sampling over the same rng stream.
//!
//! Maps live in an [`ErrorMapStore`] and are replaced by atomic whole-map
//! swaps, so a concurrent refresh never exposes a partially updated map.
//! Refresh work walks the images round-robin via [`ErrorMapStore::refresh_targets`].

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::RwLock;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::net::ProbMap;
use crate::util::unflatten;
use crate::volume::LabelMap;

/// Acceptance rule: a proposal with error `e` survives the variate `u`.
pub fn accept(error: f32, epsilon: f64, u: f64) -> bool {
    f64::from(error) > u - epsilon
}

/// Probability that [`accept`] passes for `u ~ U[0,1)`.
pub fn acceptance_probability(error: f32, epsilon: f64) -> f64 {
    (f64::from(error) + epsilon).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Acceptance slack; `>= 1` disables rejection entirely.
    pub epsilon: f64,
    /// Proposals per slot before the best-seen center is forced.
    pub max_attempts: u32,
    /// Images drawn (without replacement) into the per-batch pool.
    pub images_per_batch: usize,
    /// Patch slots per batch; each draws its image uniformly from the pool.
    pub patches_per_batch: usize,
    /// Images whose maps refresh per update cycle, round-robin.
    pub refresh_subset: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            epsilon: 0.01,
            max_attempts: 100,
            images_per_batch: 10,
            patches_per_batch: 50,
            refresh_subset: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(CoreError::Config(format!(
                "epsilon {} must be a finite non-negative number",
                self.epsilon
            )));
        }
        if self.max_attempts == 0 {
            return Err(CoreError::Config("max_attempts must be at least 1".into()));
        }
        if self.images_per_batch == 0 || self.patches_per_batch == 0 {
            return Err(CoreError::Config(
                "images_per_batch and patches_per_batch must be at least 1".into(),
            ));
        }
        if self.refresh_subset == 0 {
            return Err(CoreError::Config("refresh_subset must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-class voxel lists for one image, classes ascending, coordinates in
/// row-major order. Only classes that actually occur are present.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    entries: Vec<(u16, Vec<usize>)>,
}

impl ClassIndex {
    pub fn build(labels: &LabelMap) -> Self {
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); labels.num_classes as usize];
        for (v, &l) in labels.labels.iter().enumerate() {
            per_class[l as usize].push(v);
        }
        let entries = per_class
            .into_iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(c, v)| (c as u16, v))
            .collect();
        ClassIndex { entries }
    }

    pub fn entries(&self) -> &[(u16, Vec<usize>)] {
        &self.entries
    }

    /// Number of classes present.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn voxels(&self, class: u16) -> Option<&[usize]> {
        self.entries
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, v)| v.as_slice())
    }
}

/// One image as the sampler sees it.
#[derive(Debug, Clone)]
pub struct SamplerImage {
    pub id: String,
    pub dims: Vec<usize>,
    pub index: ClassIndex,
}

impl SamplerImage {
    pub fn new(id: impl Into<String>, labels: &LabelMap) -> Self {
        SamplerImage {
            id: id.into(),
            dims: labels.dims.clone(),
            index: ClassIndex::build(labels),
        }
    }
}

/// An immutable error-map snapshot. Readers hold an `Arc` and are unaffected
/// by later swaps.
#[derive(Debug, Clone)]
pub struct ErrorMap {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
    /// Incremented on every swap.
    pub version: u64,
}

struct StoreInner {
    maps: HashMap<String, Arc<ErrorMap>>,
    /// Insertion order; drives the round-robin refresh cursor.
    order: Vec<String>,
    cursor: usize,
}

/// Shared registry of per-image error maps.
#[derive(Default)]
pub struct ErrorMapStore {
    inner: RwLock<StoreInner>,
}

impl Default for StoreInner {
    fn default() -> Self {
        StoreInner {
            maps: HashMap::new(),
            order: Vec::new(),
            cursor: 0,
        }
    }
}

impl ErrorMapStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an image with the all-ones map (every voxel maximally
    /// interesting). Re-registering resets the map but keeps the refresh slot.
    pub fn insert_initial(&self, id: &str, dims: &[usize]) {
        let n: usize = dims.iter().product();
        let map = Arc::new(ErrorMap {
            dims: dims.to_vec(),
            values: vec![1.0; n],
            version: 0,
        });
        let mut inner = self.inner.write();
        if inner.maps.insert(id.to_string(), map).is_none() {
            inner.order.push(id.to_string());
        }
    }

    pub fn get(&self, id: &str) -> Option<Arc<ErrorMap>> {
        self.inner.read().maps.get(id).cloned()
    }

    /// Atomically replaces the map for `id`. Values must already be final:
    /// the whole map becomes visible at once, never element by element.
    pub fn swap(&self, id: &str, values: Vec<f32>) -> Result<()> {
        let mut inner = self.inner.write();
        let old = inner
            .maps
            .get(id)
            .ok_or_else(|| CoreError::Invalid(format!("no error map registered for image {id}")))?;
        if values.len() != old.values.len() {
            return Err(CoreError::Shape(format!(
                "error map for {id} has {} values, expected {}",
                values.len(),
                old.values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::Invalid(format!(
                "error map value {bad} for {id} outside [0, 1]"
            )));
        }
        let map = Arc::new(ErrorMap {
            dims: old.dims.clone(),
            values,
            version: old.version + 1,
        });
        inner.maps.insert(id.to_string(), map);
        Ok(())
    }

    /// Next `count` image ids in round-robin order, advancing the cursor.
    pub fn refresh_targets(&self, count: usize) -> Vec<String> {
        let mut inner = self.inner.write();
        let n = inner.order.len();
        if n == 0 {
            return Vec::new();
        }
        let k = count.min(n);
        let start = inner.cursor;
        let out = (0..k).map(|i| inner.order[(start + i) % n].clone()).collect();
        inner.cursor = (start + k) % n;
        out
    }

    pub fn ids(&self) -> Vec<String> {
        self.inner.read().order.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.read().order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean_error(&self, id: &str) -> Option<f64> {
        let map = self.get(id)?;
        let sum: f64 = map.values.iter().map(|&v| f64::from(v)).sum();
        Some(sum / map.values.len() as f64)
    }
}

/// Refreshed map contents: `E(x) = 1 - p(true class at x)`.
pub fn error_from_probs(probs: &ProbMap, labels: &LabelMap) -> Result<Vec<f32>> {
    if probs.dims != labels.dims {
        return Err(CoreError::Shape(format!(
            "probability dims {:?} do not match label dims {:?}",
            probs.dims, labels.dims
        )));
    }
    if probs.num_classes != labels.num_classes {
        return Err(CoreError::Shape(format!(
            "probability classes {} do not match label classes {}",
            probs.num_classes, labels.num_classes
        )));
    }
    let k = probs.num_classes as usize;
    Ok(labels
        .labels
        .iter()
        .enumerate()
        .map(|(v, &t)| 1.0 - probs.data[v * k + t as usize])
        .collect())
}

/// One sampled training center.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pick {
    pub image: String,
    pub class: u16,
    /// Voxel coordinate after clamping the output block inside the image.
    pub center: Vec<usize>,
    /// Proposals consumed, including the accepted one.
    pub attempts: u32,
    /// True when the attempt cap forced the best-seen proposal.
    pub forced: bool,
}

/// Clamps a center so the output block of `extent` voxels per axis, starting
/// at `center - extent/2`, stays inside `dims`.
pub fn clamp_center(center: &mut [usize], dims: &[usize], extent: usize) {
    for (c, &d) in center.iter_mut().zip(dims) {
        debug_assert!(d >= extent);
        *c = (*c).clamp(extent / 2, d - extent + extent / 2);
    }
}

fn finish(img: &SamplerImage, class: u16, voxel: usize, attempts: u32, forced: bool, extent: usize) -> Pick {
    let mut center = unflatten(voxel, &img.dims);
    clamp_center(&mut center, &img.dims, extent);
    Pick {
        image: img.id.clone(),
        class,
        center,
        attempts,
        forced,
    }
}

/// Samples one center from `img` against its error map.
///
/// Draw order per attempt is fixed: class, voxel, then (only when
/// `epsilon < 1`) the acceptance variate.
pub fn pick_center(
    img: &SamplerImage,
    map: &ErrorMap,
    epsilon: f64,
    max_attempts: u32,
    out_extent: usize,
    rng: &mut impl Rng,
) -> Result<Pick> {
    if img.index.is_empty() {
        return Err(CoreError::Invalid(format!("image {} has no voxels to sample", img.id)));
    }
    if map.dims != img.dims {
        return Err(CoreError::Shape(format!(
            "error map dims {:?} do not match image {} dims {:?}",
            map.dims, img.id, img.dims
        )));
    }
    let entries = img.index.entries();
    let mut best: Option<(f32, u16, usize)> = None;
    for attempt in 1..=max_attempts {
        let (class, voxels) = &entries[rng.gen_range(0..entries.len())];
        let voxel = voxels[rng.gen_range(0..voxels.len())];
        if epsilon >= 1.0 {
            return Ok(finish(img, *class, voxel, attempt, false, out_extent));
        }
        let error = map.values[voxel];
        let u: f64 = rng.gen();
        if accept(error, epsilon, u) {
            return Ok(finish(img, *class, voxel, attempt, false, out_extent));
        }
        if best.is_none_or(|(e, _, _)| error > e) {
            best = Some((error, *class, voxel));
        }
    }
    let (_, class, voxel) = best.unwrap();
    Ok(finish(img, class, voxel, max_attempts, true, out_extent))
}

/// Batch assembly over a shared error-map store.
pub struct Sampler {
    cfg: SamplerConfig,
    images: Vec<SamplerImage>,
    store: Arc<ErrorMapStore>,
    out_extent: usize,
}

impl Sampler {
    /// Registers every image with an all-ones map.
    pub fn new(cfg: SamplerConfig, images: Vec<SamplerImage>, out_extent: usize) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(CoreError::Config("sampler needs at least one image".into()));
        }
        for img in &images {
            if let Some((axis, &d)) = img.dims.iter().enumerate().find(|(_, &d)| d < out_extent) {
                return Err(CoreError::Config(format!(
                    "image {} extent {d} along axis {axis} is smaller than the output block {out_extent}",
                    img.id
                )));
            }
        }
        let store = Arc::new(ErrorMapStore::new());
        for img in &images {
            store.insert_initial(&img.id, &img.dims);
        }
        Ok(Sampler {
            cfg,
            images,
            store,
            out_extent,
        })
    }

    pub fn cfg(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn images(&self) -> &[SamplerImage] {
        &self.images
    }

    pub fn out_extent(&self) -> usize {
        self.out_extent
    }

    /// Shared handle for refresh work on another thread.
    pub fn store(&self) -> Arc<ErrorMapStore> {
        Arc::clone(&self.store)
    }

    /// Ids whose maps the next refresh cycle should recompute.
    pub fn refresh_targets(&self) -> Vec<String> {
        self.store.refresh_targets(self.cfg.refresh_subset)
    }

    /// Fills one batch of picks. Draw order is fixed: the image pool
    /// (without replacement), then per slot an image from the pool followed
    /// by that slot's proposals, all from the one rng.
    pub fn fill_batch(&self, rng: &mut impl Rng) -> Result<Vec<Pick>> {
        let n = self.images.len();
        let k = self.cfg.images_per_batch.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = rng.gen_range(i..n);
            pool.swap(i, j);
        }
        let mut picks = Vec::with_capacity(self.cfg.patches_per_batch);
        for _ in 0..self.cfg.patches_per_batch {
            let img = &self.images[pool[rng.gen_range(0..k)]];
            let map = self
                .store
                .get(&img.id)
                .ok_or_else(|| CoreError::Invalid(format!("no error map registered for image {}", img.id)))?;
            picks.push(pick_center(
                img,
                &map,
                self.cfg.epsilon,
                self.cfg.max_attempts,
                self.out_extent,
                rng,
            )?);
        }
        Ok(picks)
    }
}
