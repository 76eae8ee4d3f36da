//! Command-line front end: dataset generation, training, inference,
//! evaluation, and error-map export.
//!
//! Every training run directory records the resolved config, the master
//! seed, and a content hash of the dataset it consumed, which together
//! reproduce the run bit-exactly. `ISAMPLE_THREADS` caps the library's
//! internal parallelism; `0` or `1` force the sequential path.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use isample_core::augment::extract_patch_pair;
use isample_core::eval::{apply_post_filter, segment, write_error_map_pgm, DiceReport};
use isample_core::net::{full_image_inference, load_checkpoint};
use isample_core::nn::Mode;
use isample_core::sampler::{clamp_center, error_from_probs};
use isample_core::synth::{self, Dataset, DatasetItem, Split, SyntheticConfig};
use isample_core::train::{run_training, RefreshMode, RunConfig, SamplerKind, TrainInputs};
use isample_core::util::{block_start, splitmix64, unflatten};
use isample_core::volume::{clamp_normalize, load_labels, load_volume, save_labels, LabelMap, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "isample", version, about = "Adaptive error-map patch sampling for segmentation training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic dataset with a manifest.
    GenData(GenDataArgs),
    /// Train a model, writing logs and checkpoints into a run directory.
    Train(TrainArgs),
    /// Segment one volume with a trained checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint against a dataset split, emitting a Dice CSV.
    Eval(EvalArgs),
    /// Export a checkpoint's per-image error maps as PGM images.
    ExportMaps(ExportMapsArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SamplerArg {
    Isample,
    Uniform,
}

impl From<SamplerArg> for SamplerKind {
    fn from(a: SamplerArg) -> Self {
        match a {
            SamplerArg::Isample => SamplerKind::Isample,
            SamplerArg::Uniform => SamplerKind::Uniform,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum RefreshArg {
    Sync,
    Overlap,
}

impl From<RefreshArg> for RefreshMode {
    fn from(a: RefreshArg) -> Self {
        match a {
            RefreshArg::Sync => RefreshMode::Sync,
            RefreshArg::Overlap => RefreshMode::Overlap,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
}

impl From<SplitArg> for Split {
    fn from(a: SplitArg) -> Self {
        match a {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator preset.
    #[arg(long, default_value = "kidney2d")]
    preset: String,
    /// Full generator config TOML, replacing the preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Volume-count override.
    #[arg(long)]
    volumes: Option<usize>,
    /// Per-class target foreground voxel fraction override.
    #[arg(long)]
    fg_fraction: Option<f64>,
    /// Output directory for volumes, labels, and manifest.txt.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (or manifest file) produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for config echo, logs, and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Experiment preset.
    #[arg(long, default_value = "kidney2d")]
    preset: String,
    /// Full run config TOML, replacing the preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Patch sampling scheme.
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    /// Sampler acceptance slack in [0, 1]; 1.0 accepts every proposal.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch-count override.
    #[arg(long)]
    epochs: Option<u64>,
    /// Error-map refresh scheduling override.
    #[arg(long, value_enum)]
    refresh: Option<RefreshArg>,
    /// Export every refreshed error map as a PGM under maps/.
    #[arg(long)]
    snapshot_maps: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Dump this many augmented patch pairs as PGMs under patches/ first.
    #[arg(long, default_value_t = 0)]
    dump_patches: usize,
    /// Reuse a non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input volume (ISVL).
    #[arg(long)]
    volume: PathBuf,
    /// Output label map (ISVL).
    #[arg(long)]
    out: PathBuf,
    /// Keep only the largest connected component per foreground class.
    #[arg(long)]
    post_filter: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (or manifest file) produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Dataset split to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
    split: SplitArg,
    /// Keep only the largest connected component per foreground class.
    #[arg(long)]
    post_filter: bool,
    /// Write the per-image, per-class Dice CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportMapsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (or manifest file) produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Dataset split to export.
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    /// Output directory for one PGM per image.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_interrupt(_: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

/// Ctrl-C (or SIGTERM) checkpoints and exits at the next batch boundary.
fn install_interrupt_handler() {
    let handler = on_interrupt as extern "C" fn(libc::c_int) as libc::sighandler_t;
    unsafe {
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::ExportMaps(a) => cmd_export_maps(a),
    }
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Refuses to reuse a non-empty directory unless forced.
fn ensure_fresh_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.is_dir() && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        bail!("{} already contains files; pass --force to reuse it", dir.display());
    }
    Ok(())
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.txt")
    } else {
        data.to_path_buf()
    }
}

/// Hash of the manifest plus every file it references, in manifest order.
fn hash_inputs(manifest: &Path) -> Result<String> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut hasher = Sha256::new();
    let read = |p: &Path| fs::read(p).with_context(|| format!("reading {}", p.display()));
    hasher.update(read(manifest)?);
    for e in &synth::load_manifest(manifest)?.entries {
        hasher.update(read(&base.join(&e.volume))?);
        hasher.update(read(&base.join(&e.labels))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => parse_toml::<SyntheticConfig>(path)?,
        None => match a.preset.as_str() {
            "kidney2d" => SyntheticConfig::kidney2d(0),
            other => bail!("unknown generator preset {other}; available: kidney2d"),
        },
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.volumes {
        cfg.volumes = n;
    }
    if let Some(f) = a.fg_fraction {
        cfg.fg_fraction = f;
    }
    ensure_fresh_dir(&a.out, a.force)?;

    let manifest = synth::write_dataset(&cfg, &a.out)?;
    let (train, val): (Vec<_>, Vec<_>) = manifest.entries.iter().partition(|e| e.split == Split::Train);
    println!(
        "wrote {} volumes ({} train / {} validation) to {}",
        manifest.entries.len(),
        train.len(),
        val.len(),
        a.out.display()
    );

    // Measured fractions come from the files just written, not the target.
    // `class_fractions` indexes foreground classes from 0.
    let mut fractions = vec![Vec::new(); (cfg.num_classes as usize).saturating_sub(1)];
    for e in &manifest.entries {
        let labels = load_labels(a.out.join(&e.labels), cfg.num_classes)?;
        let f = synth::class_fractions(&labels.labels, cfg.num_classes, labels.labels.len());
        for (i, x) in f.iter().enumerate() {
            fractions[i].push(*x);
        }
    }
    for (i, f) in fractions.iter().enumerate() {
        let mean = f.iter().sum::<f64>() / f.len().max(1) as f64;
        let min = f.iter().copied().fold(f64::MAX, f64::min);
        let max = f.iter().copied().fold(f64::MIN, f64::max);
        println!(
            "class {} foreground fraction: target {}, measured mean {mean:.6} (min {min:.6}, max {max:.6})",
            i + 1,
            cfg.fg_fraction
        );
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(path) => parse_toml::<RunConfig>(path)?,
        None => RunConfig::preset(&a.preset)
            .with_context(|| format!("unknown preset {}; available: kidney2d, kidney, multiorgan", a.preset))?,
    };
    if let Some(s) = a.sampler {
        run.train.sampler = s.into();
    }
    if let Some(e) = a.epsilon {
        run.sampler.epsilon = e;
    }
    if let Some(s) = a.seed {
        run.train.master_seed = s;
    }
    if let Some(n) = a.epochs {
        run.train.epochs = n;
    }
    if let Some(r) = a.refresh {
        run.train.refresh = r.into();
    }
    if a.snapshot_maps {
        run.train.snapshot_maps = true;
    }
    run.validate()?;

    let manifest = manifest_path(&a.data);
    let dataset = Dataset::load(&manifest)?;
    let train_items = dataset.split_items(Split::Train);
    let val_items = dataset.split_items(Split::Validation);
    if train_items.is_empty() {
        bail!("dataset {} has no training split", manifest.display());
    }

    ensure_fresh_dir(&a.out, a.force)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let echo = toml::to_string_pretty(&run).context("serializing resolved config")?;
    fs::write(a.out.join("config.toml"), echo).context("writing config echo")?;
    let digest = hash_inputs(&manifest)?;
    fs::write(
        a.out.join("run.txt"),
        format!("seed={}\ndata={}\ndata_sha256={digest}\n", run.train.master_seed, manifest.display()),
    )
    .context("writing run.txt")?;

    if a.dump_patches > 0 {
        dump_patches(&run, &train_items, &a.out, a.dump_patches)?;
    }

    let volumes: Vec<Volume> = train_items.iter().map(|i| i.volume.clone()).collect();
    let labels: Vec<LabelMap> = train_items.iter().map(|i| i.labels.clone()).collect();
    let val_volumes: Vec<Volume> = val_items.iter().map(|i| i.volume.clone()).collect();
    let val_labels: Vec<LabelMap> = val_items.iter().map(|i| i.labels.clone()).collect();
    let inputs = TrainInputs {
        volumes: &volumes,
        labels: &labels,
        val_volumes: &val_volumes,
        val_labels: &val_labels,
    };

    println!(
        "training on {} images ({} validation), sampler {}, seed {}, input sha256 {}",
        volumes.len(),
        val_volumes.len(),
        match run.train.sampler {
            SamplerKind::Isample => "isample",
            SamplerKind::Uniform => "uniform",
        },
        run.train.master_seed,
        &digest[..12],
    );
    install_interrupt_handler();
    let outcome = run_training(&run, &inputs, &a.out, Some(&STOP), a.resume.as_deref())?;
    write_curves(&a.out, &run)?;

    if outcome.stopped_early {
        println!("interrupted after {} epochs; state saved to {}", outcome.epochs_completed, outcome.final_checkpoint.display());
    } else {
        println!("completed {} epochs; final checkpoint {}", outcome.epochs_completed, outcome.final_checkpoint.display());
    }
    if let Some(loss) = outcome.final_mean_loss {
        println!("final mean loss: {loss:.6}");
    }
    match outcome.final_val_dice {
        Some(d) => println!("final validation mean Dice: {d:.4}"),
        None => println!("final validation mean Dice: n/a (no validation ran)"),
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (mut model, _, _) = load_checkpoint::<f32>(&a.checkpoint)?;
    let vol = clamp_normalize(&load_volume(&a.volume)?);
    let probs = full_image_inference(&mut model, &vol)?;
    let mut pred = segment(&probs);
    if a.post_filter {
        apply_post_filter(&probs.dims, &mut pred, probs.num_classes);
    }
    let mut counts = vec![0usize; probs.num_classes as usize];
    for &l in &pred {
        counts[l as usize] += 1;
    }
    let labels = LabelMap::new(probs.dims.clone(), pred, probs.num_classes)?;
    save_labels(&labels, &vol.spacing, &a.out)?;
    println!("wrote {}", a.out.display());
    for (c, n) in counts.iter().enumerate() {
        println!("class {c}: {n} voxels");
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (mut model, _, _) = load_checkpoint::<f32>(&a.checkpoint)?;
    let dataset = Dataset::load(&manifest_path(&a.data))?;
    let items = dataset.split_items(a.split.into());
    if items.is_empty() {
        bail!("split {:?} of {} is empty", a.split, a.data.display());
    }

    let mut report = DiceReport::default();
    for item in &items {
        let probs = full_image_inference(&mut model, &item.volume)?;
        let mut pred = segment(&probs);
        if a.post_filter {
            apply_post_filter(&probs.dims, &mut pred, probs.num_classes);
        }
        let scores = isample_core::eval::score_prediction(&pred, &item.labels)?;
        for (c, s) in scores.iter().enumerate().skip(1) {
            report.push(item.id.clone(), c as u16, *s);
        }
    }

    match &a.out {
        Some(path) => {
            report.write_csv(path)?;
            println!("wrote {}", path.display());
        }
        None => print!("{}", report.to_csv()),
    }
    println!("mean Dice over {} images: {:.4}", items.len(), report.mean());
    Ok(())
}

fn cmd_export_maps(a: ExportMapsArgs) -> Result<()> {
    let (mut model, _, _) = load_checkpoint::<f32>(&a.checkpoint)?;
    let dataset = Dataset::load(&manifest_path(&a.data))?;
    let items = dataset.split_items(a.split.into());
    if items.is_empty() {
        bail!("split {:?} of {} is empty", a.split, a.data.display());
    }
    ensure_fresh_dir(&a.out, a.force)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut total = 0.0;
    for item in &items {
        let probs = full_image_inference(&mut model, &item.volume)?;
        let values = error_from_probs(&probs, &item.labels)?;
        let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / values.len() as f64;
        total += mean;
        let slice = if probs.dims.len() == 3 { Some(probs.dims[0] / 2) } else { None };
        write_error_map_pgm(&a.out.join(format!("{}.pgm", item.id)), &probs.dims, &values, slice)?;
        println!("{}: mean error {mean:.6}", item.id);
    }
    println!("overall mean error: {:.6}", total / items.len() as f64);
    Ok(())
}

/// Debug export: sampled patch pairs as PGM triples (high-res crop, pooled
/// context, labels), on a stream independent of the training batches.
fn dump_patches(run: &RunConfig, items: &[&DatasetItem], run_dir: &Path, count: usize) -> Result<()> {
    let geo = run.model.geometry()?;
    let dir = run_dir.join("patches");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(run.train.master_seed ^ 0x7061_7463));
    let k = run.model.num_classes.max(2);

    for i in 0..count {
        let item = items[i % items.len()];
        let dims = &item.volume.dims;
        let mut center = unflatten(rng.gen_range(0..item.volume.voxel_count()), dims);
        clamp_center(&mut center, dims, geo.o);
        let c0 = block_start(&center, geo.o);
        let pair = extract_patch_pair(&item.volume, Some(&item.labels), &c0, &geo, &run.augment, Mode::Train, &mut rng)?;

        let hr_dims = vec![geo.p_h; geo.rank];
        let lr_dims = vec![geo.p_l; geo.rank];
        let out_dims = vec![geo.o; geo.rank];
        let mid = |d: &[usize]| if d.len() == 3 { Some(d[0] / 2) } else { None };
        let lr: Vec<f32> = pair.lr.iter().map(|&v| v as f32).collect();
        let lab: Vec<f32> = pair.targets.iter().map(|&t| f32::from(t) / f32::from(k - 1)).collect();
        write_error_map_pgm(&dir.join(format!("patch_{i:02}_hr.pgm")), &hr_dims, &normalize_unit(&pair.hr), mid(&hr_dims))?;
        write_error_map_pgm(&dir.join(format!("patch_{i:02}_ctx.pgm")), &lr_dims, &normalize_unit(&lr), mid(&lr_dims))?;
        write_error_map_pgm(&dir.join(format!("patch_{i:02}_labels.pgm")), &out_dims, &lab, mid(&out_dims))?;
    }
    println!("dumped {count} patch pairs to {}", dir.display());
    Ok(())
}

/// Affine rescale of arbitrary values onto [0, 1] for PGM display.
fn normalize_unit(values: &[f32]) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f32::MAX, f32::MIN), |(l, h), &x| (l.min(x), h.max(x)));
    if hi <= lo {
        return vec![0.5; values.len()];
    }
    values.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

/// Merges the per-epoch and validation logs into one plot-ready CSV with
/// one row per epoch; validation cells stay empty on epochs without one.
fn curves_csv(epoch_log: &str, val_log: &str, batches_per_epoch: u64, num_classes: u16) -> String {
    // epoch -> per-class (sum, count) over validation images.
    let mut val: HashMap<u64, Vec<(f64, usize)>> = HashMap::new();
    for line in val_log.lines().skip(1) {
        let mut parts = line.split(',');
        let (Some(e), Some(_), Some(c), Some(d)) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            continue;
        };
        let (Ok(e), Ok(c), Ok(d)) = (e.parse::<u64>(), c.parse::<usize>(), d.parse::<f64>()) else {
            continue;
        };
        let cells = val.entry(e).or_insert_with(|| vec![(0.0, 0); num_classes as usize]);
        if c < cells.len() {
            cells[c].0 += d;
            cells[c].1 += 1;
        }
    }

    let mut out = String::from("iteration,epoch,lr,loss,val_dice_mean");
    for c in 1..num_classes {
        out.push_str(&format!(",dice_{c}"));
    }
    out.push('\n');
    for line in epoch_log.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() < 3 {
            continue;
        }
        let Ok(epoch) = parts[0].parse::<u64>() else { continue };
        out.push_str(&format!("{},{epoch},{},{}", (epoch + 1) * batches_per_epoch, parts[1], parts[2]));
        match val.get(&epoch) {
            Some(cells) => {
                let (sum, n) = cells.iter().fold((0.0, 0), |(s, n), &(cs, cn)| (s + cs, n + cn));
                out.push_str(&format!(",{:.6}", sum / n.max(1) as f64));
                for &(cs, cn) in cells.iter().skip(1) {
                    if cn > 0 {
                        out.push_str(&format!(",{:.6}", cs / cn as f64));
                    } else {
                        out.push(',');
                    }
                }
            }
            None => out.push_str(&",".repeat(num_classes as usize)),
        }
        out.push('\n');
    }
    out
}

fn write_curves(run_dir: &Path, run: &RunConfig) -> Result<()> {
    let read = |name: &str| {
        fs::read_to_string(run_dir.join(name)).with_context(|| format!("reading {name}"))
    };
    let out = curves_csv(&read("epoch_log.csv")?, &read("val_dice.csv")?, run.train.batches_per_epoch, run.model.num_classes);
    fs::write(run_dir.join("curves.csv"), out).context("writing curves.csv")?;
    Ok(())
}
