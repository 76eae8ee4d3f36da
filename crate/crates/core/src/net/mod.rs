//! The dual-path segmentation network: a high-resolution pathway over a
//! small patch, a downsampled pathway over a larger co-centered context, and
//! a 1x1-convolution fusion head that classifies a block of output voxels at
//! once. Both pathways are plain valid-convolution stacks, so a patch forward
//! pass and whole-image inference produce bit-identical probabilities for the
//! same voxel.

mod block;
mod checkpoint;
mod config;
mod infer;
mod model;

pub use block::{BlockCache, ResBlock};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{BlockSpec, DualPathConfig, Geometry, PathSpec};
pub use infer::{full_image_inference, ProbMap};
pub use model::{DualPathModel, TrainBatch, TrainCache};
