//! Receptive-field bookkeeping for valid-convolution chains.

/// Tracks, per axis, the input extent influencing one output value.
///
/// `jump` is the input stride between neighbouring output values; a path
/// operating on `factor`-downsampled data starts with `jump = factor`, which
/// expresses its extents in original-resolution voxels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceptiveField {
    pub extent: Vec<usize>,
    pub jump: Vec<usize>,
}

impl ReceptiveField {
    pub fn new(rank: usize, downsample_factor: usize) -> Self {
        assert!(downsample_factor >= 1);
        ReceptiveField {
            extent: vec![1; rank],
            jump: vec![downsample_factor; rank],
        }
    }

    pub fn push_conv(&mut self, kernel: &[usize], stride: usize) {
        assert_eq!(kernel.len(), self.extent.len());
        for (a, &k) in kernel.iter().enumerate() {
            self.extent[a] += (k - 1) * self.jump[a];
            self.jump[a] *= stride;
        }
    }
}
