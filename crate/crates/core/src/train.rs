//! Training: Nesterov momentum over sampler-picked patch batches, with a
//! warmup-then-halving schedule, byte-deterministic logs, and resumable
//! checkpoints.
//!
//! Determinism contract: every batch derives its own rng stream from
//! `(master_seed, epoch, batch)` and consumes it in a fixed order (picks,
//! patch extraction per slot, dropout), so reruns reproduce every byte of
//! the CSV logs and checkpoints regardless of thread count. Wall-clock
//! timings go to a separate sidecar that makes no such promise.
//!
//! Error maps refresh at epoch boundaries and consume no randomness. In
//! `sync` mode the maps for the round-robin subset are recomputed from the
//! current weights and swapped immediately; in `overlap` mode the
//! recomputation runs on a background thread and its result is swapped at
//! the next boundary, so sampling sees maps at most one refresh cycle staler
//! than `sync` while the main thread keeps training.
//!
//! The `uniform` sampler mode forces `epsilon = 1` (which accepts every
//! proposal before any acceptance draw) and skips refreshes entirely; from
//! the same seed its picks, losses, and weights are bit-identical to the
//! adaptive sampler run with `epsilon = 1`, which merely does extra map work.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{assemble_batch, extract_patch_pair, AugmentConfig};
use crate::error::{CoreError, Result};
use crate::eval::{dice_per_class, segment, write_error_map_pgm};
use crate::net::{full_image_inference, load_checkpoint, save_checkpoint, DualPathConfig, DualPathModel};
use crate::nn::{Mode, Param, Scalar, Tensor};
use crate::sampler::{error_from_probs, ErrorMapStore, Sampler, SamplerConfig, SamplerImage};
use crate::util::{batch_seed, block_start, splitmix64};
use crate::volume::{LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Isample,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefreshMode {
    Sync,
    Overlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub master_seed: u64,
    /// Total epochs for the experiment; resuming continues toward this count.
    pub epochs: u64,
    pub batches_per_epoch: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs ramping the rate linearly up to the base value.
    pub warmup_epochs: u64,
    /// After warmup, halve the rate every this many epochs; 0 keeps it flat.
    pub halve_every: u64,
    /// Validate every n epochs (plus always on the last); 0 disables.
    pub val_interval: u64,
    /// Checkpoint every n epochs; the initial and final states are always kept.
    pub checkpoint_interval: u64,
    pub sampler: SamplerKind,
    pub refresh: RefreshMode,
    /// Export every refreshed error map as a PGM image under `maps/`.
    pub snapshot_maps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        RunConfig::kidney2d().train
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batches_per_epoch == 0 {
            return Err(CoreError::Config(
                "epochs and batches_per_epoch must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(CoreError::Config(format!(
                "learning_rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(CoreError::Config(format!(
                "weight_decay {} must be non-negative and finite",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Complete experiment description, normally one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: DualPathConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
}

impl RunConfig {
    /// Desk-scale 2D run; the default configuration.
    pub fn kidney2d() -> Self {
        RunConfig {
            // Desk-scale recipe: lighter dropout than the structural default;
            // the fusion head is far smaller than the full-scale presets'.
            model: DualPathConfig {
                dropout: 0.1,
                ..DualPathConfig::kidney2d()
            },
            train: TrainConfig {
                master_seed: 7,
                epochs: 30,
                batches_per_epoch: 40,
                learning_rate: 0.01,
                momentum: 0.8,
                weight_decay: 1e-4,
                warmup_epochs: 3,
                halve_every: 10,
                val_interval: 1,
                checkpoint_interval: 0,
                sampler: SamplerKind::Isample,
                refresh: RefreshMode::Sync,
                snapshot_maps: false,
            },
            sampler: SamplerConfig {
                epsilon: 0.01,
                max_attempts: 100,
                images_per_batch: 8,
                patches_per_batch: 10,
                refresh_subset: 8,
            },
            augment: AugmentConfig::none(),
        }
    }

    /// Single-organ 3D run: one foreground class, long schedule at a low rate.
    pub fn kidney() -> Self {
        RunConfig {
            model: DualPathConfig {
                rank: 3,
                num_classes: 2,
                ..DualPathConfig::kidney2d()
            },
            train: TrainConfig {
                master_seed: 7,
                epochs: 100,
                batches_per_epoch: 100,
                learning_rate: 0.001,
                momentum: 0.8,
                weight_decay: 1e-4,
                warmup_epochs: 5,
                halve_every: 0,
                val_interval: 1,
                checkpoint_interval: 10,
                sampler: SamplerKind::Isample,
                refresh: RefreshMode::Sync,
                snapshot_maps: false,
            },
            sampler: SamplerConfig {
                images_per_batch: 1,
                patches_per_batch: 12,
                ..SamplerConfig::default()
            },
            augment: AugmentConfig {
                rotation_deg: vec![10.0, 4.0, 4.0],
                ..AugmentConfig::default()
            },
        }
    }

    /// Many-class 3D run: higher rate with periodic halving.
    pub fn multiorgan() -> Self {
        let mut run = RunConfig::kidney();
        run.model.num_classes = 8;
        run.model.fusion_channels = 96;
        run.train.epochs = 200;
        run.train.batches_per_epoch = 200;
        run.train.learning_rate = 0.05;
        run.train.halve_every = 25;
        run.train.val_interval = 2;
        run.sampler.images_per_batch = 2;
        run.sampler.patches_per_batch = 24;
        run
    }

    pub fn preset(name: &str) -> Option<RunConfig> {
        match name {
            "kidney2d" => Some(RunConfig::kidney2d()),
            "kidney" => Some(RunConfig::kidney()),
            "multiorgan" => Some(RunConfig::multiorgan()),
            _ => None,
        }
    }

    /// Checks every section and returns the derived patch geometry.
    pub fn validate(&self) -> Result<crate::net::Geometry> {
        self.train.validate()?;
        self.sampler.validate()?;
        let geo = self.model.geometry()?;
        self.augment.validate(geo.rank)?;
        Ok(geo)
    }
}

/// Learning rate for an epoch: linear warmup, then optional halving.
pub fn lr_at(cfg: &TrainConfig, epoch: u64) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.learning_rate * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    if cfg.halve_every == 0 {
        return cfg.learning_rate;
    }
    let halvings = (epoch - cfg.warmup_epochs) / cfg.halve_every;
    cfg.learning_rate / f64::powi(2.0, halvings as i32)
}

/// One momentum update over all parameters: `g' = g + wd*w` (decay-flagged
/// parameters only), `v <- mu*v + g'`, `w <- w - lr*(g' + mu*v)`.
///
/// Fails with the parameter name and iteration if any weight leaves the
/// finite range, so the caller can point at its last good checkpoint.
pub fn nesterov_step<T: Scalar>(
    params: &mut [&mut Param<T>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    iteration: u64,
) -> Result<()> {
    if params.len() != velocity.len() {
        return Err(CoreError::Shape(format!(
            "{} parameters but {} momentum buffers",
            params.len(),
            velocity.len()
        )));
    }
    let lr = T::from_f64(lr);
    let mu = T::from_f64(momentum);
    for (p, vel) in params.iter_mut().zip(velocity.iter_mut()) {
        if vel.shape() != p.value.shape() {
            return Err(CoreError::Shape(format!(
                "momentum buffer for {} has shape {:?}, parameter has {:?}",
                p.name,
                vel.shape(),
                p.value.shape()
            )));
        }
        let wd = if p.decay { T::from_f64(weight_decay) } else { T::ZERO };
        for ((w, &g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(vel.data_mut()) {
            let g = g + wd * *w;
            *v = mu * *v + g;
            *w = *w - lr * (g + mu * *v);
        }
        if let Some(bad) = p.value.data().iter().find(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite {
                context: format!("parameter {} became {bad}", p.name),
                iteration,
            });
        }
    }
    Ok(())
}

/// Training and validation data; volumes are expected intensity-normalized.
pub struct TrainInputs<'a> {
    pub volumes: &'a [Volume],
    pub labels: &'a [LabelMap],
    pub val_volumes: &'a [Volume],
    pub val_labels: &'a [LabelMap],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs_completed: u64,
    pub stopped_early: bool,
    pub final_checkpoint: PathBuf,
    /// Mean foreground Dice of the last validation pass.
    pub final_val_dice: Option<f64>,
    /// Mean loss of the last completed epoch.
    pub final_mean_loss: Option<f64>,
}

struct Log {
    path: PathBuf,
    w: BufWriter<File>,
}

impl Log {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let file = File::create(&path).map_err(|e| CoreError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        if !header.is_empty() {
            w.write_all(header.as_bytes()).map_err(|e| CoreError::io(&path, e))?;
        }
        Ok(Log { path, w })
    }

    fn line(&mut self, row: &str) -> Result<()> {
        self.w
            .write_all(row.as_bytes())
            .and_then(|()| self.w.write_all(b"\n"))
            .map_err(|e| CoreError::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| CoreError::io(&self.path, e))
    }
}

fn save_with_velocity<T: Scalar>(
    model: &DualPathModel<T>,
    velocity: &[Tensor<T>],
    epochs_completed: u64,
    path: &Path,
) -> Result<()> {
    let extras: Vec<(String, Vec<f32>)> = model
        .params()
        .iter()
        .zip(velocity)
        .map(|(p, v)| {
            let data = v.data().iter().map(|x| x.to_f32()).collect();
            (format!("velocity.{}", p.name), data)
        })
        .collect();
    save_checkpoint(model, epochs_completed, &extras, path)
}

fn velocity_from_extras<T: Scalar>(
    model: &DualPathModel<T>,
    extras: &[(String, Vec<f32>)],
) -> Result<Vec<Tensor<T>>> {
    model
        .params()
        .iter()
        .map(|p| {
            let name = format!("velocity.{}", p.name);
            let (_, data) = extras
                .iter()
                .find(|(n, _)| n == &name)
                .ok_or_else(|| CoreError::Invalid(format!("checkpoint lacks momentum buffer {name}")))?;
            if data.len() != p.value.data().len() {
                return Err(CoreError::Shape(format!(
                    "momentum buffer {name} has {} values, parameter has {}",
                    data.len(),
                    p.value.data().len()
                )));
            }
            Tensor::from_vec(p.value.shape(), data.iter().map(|&x| T::from_f32(x)).collect())
        })
        .collect()
}

fn check_inputs(data: &TrainInputs<'_>, num_classes: u16, rank: usize) -> Result<()> {
    if data.volumes.is_empty() {
        return Err(CoreError::Config("training needs at least one volume".into()));
    }
    if data.volumes.len() != data.labels.len() || data.val_volumes.len() != data.val_labels.len() {
        return Err(CoreError::Config(
            "volumes and label maps must pair up one to one".into(),
        ));
    }
    let mut ids = HashSet::new();
    for (v, l) in data.volumes.iter().zip(data.labels) {
        if !ids.insert(v.id.as_str()) {
            return Err(CoreError::Config(format!("duplicate volume id {}", v.id)));
        }
        if v.rank() != rank {
            return Err(CoreError::Config(format!(
                "volume {} has rank {}, model expects rank {rank}",
                v.id,
                v.rank()
            )));
        }
        if !l.matches(v) {
            return Err(CoreError::Shape(format!(
                "labels for {} have dims {:?}, volume has {:?}",
                v.id, l.dims, v.dims
            )));
        }
        if l.num_classes != num_classes {
            return Err(CoreError::Config(format!(
                "labels for {} use {} classes, model expects {num_classes}",
                v.id, l.num_classes
            )));
        }
    }
    for (v, l) in data.val_volumes.iter().zip(data.val_labels) {
        if !l.matches(v) || l.num_classes != num_classes {
            return Err(CoreError::Config(format!(
                "validation pair {} is inconsistent with the model",
                v.id
            )));
        }
    }
    Ok(())
}

fn compute_refresh(
    model: &mut DualPathModel<f32>,
    data: &TrainInputs<'_>,
    index: &HashMap<String, usize>,
    targets: &[String],
) -> Result<Vec<(String, Vec<f32>)>> {
    let mut out = Vec::with_capacity(targets.len());
    for id in targets {
        let i = *index
            .get(id)
            .ok_or_else(|| CoreError::Invalid(format!("no training image named {id}")))?;
        let probs = full_image_inference(model, &data.volumes[i])?;
        out.push((id.clone(), error_from_probs(&probs, &data.labels[i])?));
    }
    Ok(out)
}

fn apply_refresh(
    store: &ErrorMapStore,
    values: Vec<(String, Vec<f32>)>,
    snapshot_dir: Option<&Path>,
    epoch: u64,
) -> Result<()> {
    for (id, v) in values {
        store.swap(&id, v)?;
        if let Some(dir) = snapshot_dir {
            let map = store.get(&id).expect("map registered");
            let slice = if map.dims.len() == 3 { Some(map.dims[0] / 2) } else { None };
            let path = dir.join(format!("epoch{epoch:04}_{id}.pgm"));
            write_error_map_pgm(&path, &map.dims, &map.values, slice)?;
        }
    }
    Ok(())
}

fn record_abort(run_dir: &Path, err: &CoreError, last_good: &Path) {
    let msg = format!("{err}\nlast good checkpoint: {}\n", last_good.display());
    let _ = fs::write(run_dir.join("abort.txt"), msg);
}

/// Runs (or resumes) a training experiment, writing into `run_dir`:
///
/// * `batch_log.csv` - one row per picked patch.
/// * `loss_log.csv` - one row per batch.
/// * `epoch_log.csv` - rate, mean loss, and mean error-map value per epoch.
/// * `val_dice.csv` - per-image, per-class validation Dice (no post-filter).
/// * `timing.txt` - wall-clock sidecar, the only non-deterministic output.
/// * `checkpoints/` - initial, periodic, and final model + momentum state.
/// * `maps/` - PGM snapshots of refreshed error maps when enabled.
///
/// `stop` is polled between batches; when set, the run checkpoints and
/// returns early. `resume` loads a checkpoint and continues from the epoch
/// after the one it recorded; error maps restart from all ones.
pub fn run_training(
    run: &RunConfig,
    data: &TrainInputs<'_>,
    run_dir: &Path,
    stop: Option<&AtomicBool>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let geo = run.validate()?;
    check_inputs(data, run.model.num_classes, geo.rank)?;
    let t = &run.train;

    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| CoreError::io(&ckpt_dir, e))?;
    let adaptive = t.sampler == SamplerKind::Isample;
    let snapshot_dir = if t.snapshot_maps && adaptive {
        let dir = run_dir.join("maps");
        fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
        Some(dir)
    } else {
        None
    };

    let (mut model, mut velocity, start_epoch) = match resume {
        None => {
            let model = DualPathModel::<f32>::new(run.model.clone(), splitmix64(t.master_seed))?;
            let velocity: Vec<Tensor<f32>> =
                model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            (model, velocity, 0u64)
        }
        Some(path) => {
            let (model, meta, extras) = load_checkpoint::<f32>(path)?;
            meta.ensure_matches(&run.model)?;
            let velocity = velocity_from_extras(&model, &extras)?;
            (model, velocity, meta.epoch)
        }
    };
    if start_epoch >= t.epochs {
        return Err(CoreError::Config(format!(
            "checkpoint already covers {start_epoch} of {} epochs",
            t.epochs
        )));
    }

    let mut scfg = run.sampler.clone();
    if !adaptive {
        scfg.epsilon = 1.0;
    }
    let images: Vec<SamplerImage> = data
        .volumes
        .iter()
        .zip(data.labels)
        .map(|(v, l)| SamplerImage::new(v.id.clone(), l))
        .collect();
    let sampler = Sampler::new(scfg, images, geo.o)?;
    let store = sampler.store();
    let index: HashMap<String, usize> = data
        .volumes
        .iter()
        .enumerate()
        .map(|(i, v)| (v.id.clone(), i))
        .collect();

    let mut logs = [
        Log::create(run_dir.join("batch_log.csv"), "epoch,batch,slot,image,class,center,attempts,forced\n")?,
        Log::create(run_dir.join("loss_log.csv"), "epoch,batch,loss\n")?,
        Log::create(run_dir.join("epoch_log.csv"), "epoch,lr,mean_loss,map_mean\n")?,
        Log::create(run_dir.join("val_dice.csv"), "epoch,image,class,dice\n")?,
        Log::create(run_dir.join("timing.txt"), "")?,
    ];
    let [batch_log, loss_log, epoch_log, val_log, timing] = &mut logs;

    let mut last_good = ckpt_dir.join("initial.isck");
    save_with_velocity(&model, &velocity, start_epoch, &last_good)?;

    thread::scope(|scope| -> Result<TrainOutcome> {
        let index_ref = &index;
        let mut pending: Option<thread::ScopedJoinHandle<'_, Result<Vec<(String, Vec<f32>)>>>> = None;
        let mut stopped = false;
        let mut completed = start_epoch;
        let mut last_val: Option<f64> = None;
        let mut last_mean_loss: Option<f64> = None;

        'epochs: for epoch in start_epoch..t.epochs {
            let t0 = Instant::now();
            let lr = lr_at(t, epoch);
            let mut loss_sum = 0.0f64;

            for b in 0..t.batches_per_epoch {
                if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
                    stopped = true;
                    break 'epochs;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(t.master_seed, epoch, b));
                let picks = sampler.fill_batch(&mut rng)?;
                let mut pairs = Vec::with_capacity(picks.len());
                for (slot, pick) in picks.iter().enumerate() {
                    let center: Vec<String> = pick.center.iter().map(|c| c.to_string()).collect();
                    batch_log.line(&format!(
                        "{epoch},{b},{slot},{},{},{},{},{}",
                        pick.image,
                        pick.class,
                        center.join("-"),
                        pick.attempts,
                        u8::from(pick.forced)
                    ))?;
                    let i = index[&pick.image];
                    let c0 = block_start(&pick.center, geo.o);
                    pairs.push(extract_patch_pair(
                        &data.volumes[i],
                        Some(&data.labels[i]),
                        &c0,
                        &geo,
                        &run.augment,
                        Mode::Train,
                        &mut rng,
                    )?);
                }
                let batch = assemble_batch::<f32>(&pairs, &geo)?;

                model.zero_grads();
                let (loss, _, cache) = model.forward_train(&batch, &mut rng)?;
                let iteration = epoch * t.batches_per_epoch + b;
                if !loss.is_finite() {
                    let err = CoreError::NonFinite { context: "batch loss".into(), iteration };
                    record_abort(run_dir, &err, &last_good);
                    return Err(err);
                }
                model.backward(&cache)?;
                {
                    let mut params = model.params_mut();
                    if let Err(err) =
                        nesterov_step(&mut params, &mut velocity, lr, t.momentum, t.weight_decay, iteration)
                    {
                        record_abort(run_dir, &err, &last_good);
                        return Err(err);
                    }
                }
                loss_log.line(&format!("{epoch},{b},{loss:.9}"))?;
                loss_sum += loss;
            }

            if adaptive {
                if let Some(handle) = pending.take() {
                    let values = handle
                        .join()
                        .map_err(|_| CoreError::Invalid("map refresh thread panicked".into()))??;
                    apply_refresh(&store, values, snapshot_dir.as_deref(), epoch)?;
                }
                let targets = sampler.refresh_targets();
                match t.refresh {
                    RefreshMode::Sync => {
                        let values = compute_refresh(&mut model, data, index_ref, &targets)?;
                        apply_refresh(&store, values, snapshot_dir.as_deref(), epoch)?;
                    }
                    RefreshMode::Overlap => {
                        if epoch + 1 < t.epochs {
                            let mut snap = model.clone();
                            pending = Some(scope.spawn(move || {
                                compute_refresh(&mut snap, data, index_ref, &targets)
                            }));
                        }
                    }
                }
            }

            let map_mean = {
                let ids = store.ids();
                let sum: f64 = ids.iter().filter_map(|id| store.mean_error(id)).sum();
                sum / ids.len() as f64
            };
            let mean_loss = loss_sum / t.batches_per_epoch as f64;
            epoch_log.line(&format!("{epoch},{lr:.9},{mean_loss:.9},{map_mean:.6}"))?;
            last_mean_loss = Some(mean_loss);

            let val_due = t.val_interval > 0
                && !data.val_volumes.is_empty()
                && ((epoch + 1) % t.val_interval == 0 || epoch + 1 == t.epochs);
            if val_due {
                let mut sum = 0.0f64;
                let mut count = 0usize;
                for (vol, lab) in data.val_volumes.iter().zip(data.val_labels) {
                    let probs = full_image_inference(&mut model, vol)?;
                    let pred = segment(&probs);
                    let scores = dice_per_class(&pred, &lab.labels, lab.num_classes);
                    for (c, s) in scores.iter().enumerate().skip(1) {
                        val_log.line(&format!("{epoch},{},{c},{s:.6}", vol.id))?;
                        sum += s;
                        count += 1;
                    }
                }
                last_val = Some(sum / count as f64);
            }

            completed = epoch + 1;
            if t.checkpoint_interval > 0 && completed % t.checkpoint_interval == 0 {
                let path = ckpt_dir.join(format!("epoch_{completed:04}.isck"));
                save_with_velocity(&model, &velocity, completed, &path)?;
                last_good = path;
            }
            timing.line(&format!("epoch {epoch}: {:.3}s", t0.elapsed().as_secs_f64()))?;
            // Epoch-level logs stay observable while a long run is in flight.
            epoch_log.flush()?;
            val_log.flush()?;
            timing.flush()?;
        }
        // A still-pending overlap refresh is joined by scope exit; its values
        // are stale for a finished run and are dropped.

        let final_path = ckpt_dir.join("final.isck");
        save_with_velocity(&model, &velocity, completed, &final_path)?;
        Ok(TrainOutcome {
            epochs_completed: completed,
            stopped_early: stopped,
            final_checkpoint: final_path,
            final_val_dice: last_val,
            final_mean_loss: last_mean_loss,
        })
    })
    .and_then(|outcome| {
        for log in &mut logs {
            log.flush()?;
        }
        Ok(outcome)
    })
}
