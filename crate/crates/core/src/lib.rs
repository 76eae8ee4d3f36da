//! Error-map-guided adaptive patch sampling for training segmentation networks
//! on large, sparse volumes, together with the dual-path convolutional network,
//! training loop, and evaluation tooling it drives.
//!
//! The pieces fit together like this:
//!
//! * [`volume`] holds the scalar-grid data model (`Volume`, `LabelMap`), the
//!   on-disk `ISVL` container, and intensity normalization.
//! * [`synth`] generates seeded synthetic sparse-segmentation datasets
//!   (tiny foreground blobs, intensity-matched distractors, interior holes).
//! * [`nn`] contains rank-generic layer kernels with hand-written backward
//!   passes, plus a finite-difference gradient checker.
//! * [`net`] assembles the two-pathway network and runs exact tiled
//!   full-image inference.
//! * [`sampler`] implements the adaptive scheme: per-image error maps,
//!   class-balanced center proposals, and the epsilon rejection rule.
//! * [`augment`] extracts co-centered dual-resolution patch pairs with
//!   spacing jitter and rotation.
//! * [`train`] is the SGD/Nesterov optimization loop with warm-up and
//!   halving schedules and CSV logging.
//! * [`eval`] scores segmentations (Dice), filters connected components,
//!   and exports error maps as PGM images.
//!
//! Data-parallel inner loops (batch slots, inference tiles, per-image
//! refresh) go through [`exec`], which falls back to sequential execution
//! when the `parallel` feature is disabled or `ISAMPLE_THREADS=0`. All
//! parallel loops are bit-stable: a fixed seed produces identical results
//! at any thread count.

pub mod augment;
pub mod error;
pub mod eval;
pub mod exec;
pub mod net;
pub mod nn;
pub mod sampler;
pub mod synth;
pub mod train;
pub mod util;
pub mod volume;

pub use error::CoreError;
