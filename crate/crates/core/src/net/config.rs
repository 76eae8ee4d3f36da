//! Architecture description and the derived patch geometry.
//!
//! Every geometric quantity is an integer, fixed before training:
//!
//! * `n_h`, `n_l` - number of valid 3-convolutions in each pathway; each one
//!   shrinks the map by one cell per side.
//! * `o` - edge of the block of voxels classified per patch.
//! * `p_h` - high-resolution patch edge; after the convolutions the map is
//!   `p_h - 2*n_h` wide and a further centered crop of `k_h` per side brings
//!   it to `o`.
//! * `f` - downsample factor of the low-resolution pathway.
//! * `g` - distinct pooled cells an output block can touch; with pooling
//!   phase `p` in `[0, f)`, output voxel `j` reads pooled feature
//!   `(p + j) / f`, so `g = (o + f - 2)/f + 1`.
//! * `p_l` - low-resolution patch edge in pooled cells, `2*n_l + g`, which
//!   leaves exactly `g` feature cells after the convolutions.
//! * `c` - native-resolution extent of the pooled context, `f * p_l`.
//!
//! The phase ties patch extraction to whole-image inference: a patch whose
//! output block starts at voxel `c0` uses `p = c0 mod f` per axis, which
//! aligns its pooling grid with the single global grid, so overlapping
//! placements agree bitwise.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    /// Bottleneck blocks use 1x1 -> 3 -> 1x1 with a quarter-width middle and
    /// consume one cell per side; standard blocks use two 3-convolutions and
    /// consume two.
    #[serde(default)]
    pub bottleneck: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
}

impl PathSpec {
    /// Number of 3-convolutions, which equals the cells consumed per side.
    pub fn conv_count(&self) -> usize {
        1 + self
            .blocks
            .iter()
            .map(|b| if b.bottleneck { 1 } else { 2 })
            .sum::<usize>()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks
            .last()
            .map(|b| b.channels)
            .unwrap_or(self.stem_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualPathConfig {
    pub rank: usize,
    pub num_classes: u16,
    pub hr: PathSpec,
    pub lr: PathSpec,
    /// Downsample factor of the low-resolution pathway.
    pub downsample: usize,
    /// Output block edge in voxels.
    pub out_extent: usize,
    /// High-resolution patch edge in voxels.
    pub hr_extent: usize,
    /// Optional echo of the low-resolution patch edge in pooled cells; must
    /// match the derived value when present.
    pub lr_extent: Option<usize>,
    pub fusion_channels: usize,
    /// Number of hidden 1x1 layers in the fusion head.
    pub fusion_layers: usize,
    pub dropout: f64,
}

impl Default for DualPathConfig {
    fn default() -> Self {
        DualPathConfig::kidney2d()
    }
}

impl DualPathConfig {
    /// Desk-scale 2D network: 33-voxel patch classifying a 9x9 block with a
    /// 4x-downsampled 68-voxel context.
    pub fn kidney2d() -> Self {
        DualPathConfig {
            rank: 2,
            num_classes: 2,
            hr: PathSpec {
                stem_channels: 8,
                blocks: vec![
                    BlockSpec { channels: 16, bottleneck: false },
                    BlockSpec { channels: 16, bottleneck: false },
                ],
            },
            lr: PathSpec {
                stem_channels: 8,
                blocks: vec![
                    BlockSpec { channels: 16, bottleneck: false },
                    BlockSpec { channels: 16, bottleneck: false },
                    BlockSpec { channels: 32, bottleneck: false },
                ],
            },
            downsample: 4,
            out_extent: 9,
            hr_extent: 33,
            lr_extent: None,
            fusion_channels: 64,
            fusion_layers: 2,
            dropout: 0.5,
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let fail = |m: String| Err(CoreError::Config(m));
        if !(self.rank == 2 || self.rank == 3) {
            return fail(format!("rank {} unsupported, expected 2 or 3", self.rank));
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if self.downsample < 2 {
            return fail(format!("downsample {} must be at least 2", self.downsample));
        }
        if self.out_extent == 0 {
            return fail("out_extent must be positive".into());
        }
        for (path, spec) in [("hr", &self.hr), ("lr", &self.lr)] {
            if spec.stem_channels == 0 || spec.blocks.iter().any(|b| b.channels == 0) {
                return fail(format!("{path} path has a zero-channel layer"));
            }
            for b in &spec.blocks {
                if b.bottleneck && b.channels < 4 {
                    return fail(format!(
                        "{path} bottleneck block needs at least 4 channels, got {}",
                        b.channels
                    ));
                }
            }
        }
        if self.fusion_channels == 0 {
            return fail("fusion_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0,1)", self.dropout));
        }

        let f = self.downsample;
        let o = self.out_extent;
        let n_h = self.hr.conv_count();
        let n_l = self.lr.conv_count();
        if (self.hr_extent.wrapping_sub(o)) % 2 != 0 || self.hr_extent < o {
            return fail(format!(
                "hr_extent {} and out_extent {o} must differ by an even, nonnegative margin",
                self.hr_extent
            ));
        }
        let m_h = (self.hr_extent - o) / 2;
        if m_h < n_h {
            return fail(format!(
                "hr margin {m_h} is smaller than the {n_h} cells its convolutions consume; \
                 hr_extent must be at least {}",
                o + 2 * n_h
            ));
        }
        let g = (o + f - 2) / f + 1;
        let p_l = 2 * n_l + g;
        if let Some(echo) = self.lr_extent {
            if echo != p_l {
                return fail(format!(
                    "lr_extent {echo} does not match the derived {p_l} pooled cells \
                     (2*{n_l} convolutions + {g} gathered)"
                ));
            }
        }
        Ok(Geometry {
            rank: self.rank,
            f,
            o,
            n_h,
            n_l,
            p_h: self.hr_extent,
            m_h,
            k_h: m_h - n_h,
            g,
            p_l,
            c: f * p_l,
        })
    }
}

/// Derived per-axis patch geometry; identical on every axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub rank: usize,
    /// Low-resolution downsample factor.
    pub f: usize,
    /// Output block edge.
    pub o: usize,
    /// 3-convolutions in the high-resolution pathway.
    pub n_h: usize,
    /// 3-convolutions in the low-resolution pathway.
    pub n_l: usize,
    /// High-resolution patch edge.
    pub p_h: usize,
    /// High-resolution margin per side, `(p_h - o)/2`.
    pub m_h: usize,
    /// Centered crop per side after the high-resolution convolutions.
    pub k_h: usize,
    /// Pooled feature cells gathered per axis.
    pub g: usize,
    /// Low-resolution patch edge in pooled cells.
    pub p_l: usize,
    /// Native extent of the pooled context, `f * p_l`.
    pub c: usize,
}

impl Geometry {
    /// Offset from the output block start back to the context window start in
    /// native voxels, for pooling phase `p`.
    pub fn context_offset(&self, p: usize) -> usize {
        debug_assert!(p < self.f);
        self.f * self.n_l + p
    }

    /// Pooled feature cell that covers output voxel `j` of the block, for
    /// pooling phase `p`.
    pub fn gather_cell(&self, p: usize, j: usize) -> usize {
        debug_assert!(p < self.f && j < self.o);
        (p + j) / self.f
    }

    /// Repeats the scalar edge for each axis.
    pub fn per_axis(&self, edge: usize) -> Vec<usize> {
        vec![edge; self.rank]
    }
}
