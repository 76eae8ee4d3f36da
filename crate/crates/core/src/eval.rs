//! Segmentation metrics and prediction post-processing.
//!
//! Predictions come out of [`segment`] as per-voxel argmax labels; the
//! optional post-filter keeps only the largest face-connected component of
//! each foreground class, which removes isolated false positives. Overlap is
//! scored with the Dice coefficient per class. Error maps export as 8-bit
//! PGM images for visual inspection.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::net::ProbMap;
use crate::util::strides;
use crate::volume::LabelMap;

/// Dice overlap `2|P and T| / (|P| + |T|)`; two empty sets count as perfect.
pub fn dice_binary(pred: &[bool], truth: &[bool]) -> f64 {
    debug_assert_eq!(pred.len(), truth.len());
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        inter += usize::from(p && t);
        total += usize::from(p) + usize::from(t);
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Dice per class id, indexed `0..num_classes`.
pub fn dice_per_class(pred: &[u16], truth: &[u16], num_classes: u16) -> Vec<f64> {
    debug_assert_eq!(pred.len(), truth.len());
    let k = num_classes as usize;
    let mut inter = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            inter[p as usize] += 1;
        }
        total[p as usize] += 1;
        total[t as usize] += 1;
    }
    (0..k)
        .map(|c| {
            if total[c] == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / total[c] as f64
            }
        })
        .collect()
}

/// Per-voxel argmax labels; ties resolve to the lowest class id.
pub fn segment(probs: &ProbMap) -> Vec<u16> {
    let k = probs.num_classes as usize;
    let n: usize = probs.dims.iter().product();
    let mut out = vec![0u16; n];
    for (v, o) in out.iter_mut().enumerate() {
        let row = &probs.data[v * k..(v + 1) * k];
        let mut best = 0usize;
        for (c, &p) in row.iter().enumerate().skip(1) {
            if p > row[best] {
                best = c;
            }
        }
        *o = best as u16;
    }
    out
}

/// Face-connected components (4 neighbors in 2D, 6 in 3D) of a mask.
///
/// Returns per-voxel component ids, 0 off the mask and `1..=count` on it,
/// numbered by the row-major position of each component's first voxel.
pub fn connected_components(dims: &[usize], mask: &[bool]) -> (Vec<u32>, usize) {
    let n: usize = dims.iter().product();
    debug_assert_eq!(mask.len(), n);
    let st = strides(dims);
    let mut comp = vec![0u32; n];
    let mut count = 0u32;
    let mut queue = std::collections::VecDeque::new();
    for seed in 0..n {
        if !mask[seed] || comp[seed] != 0 {
            continue;
        }
        count += 1;
        comp[seed] = count;
        queue.push_back(seed);
        while let Some(v) = queue.pop_front() {
            for (a, &s) in st.iter().enumerate() {
                let i = v / s % dims[a];
                if i > 0 {
                    let w = v - s;
                    if mask[w] && comp[w] == 0 {
                        comp[w] = count;
                        queue.push_back(w);
                    }
                }
                if i + 1 < dims[a] {
                    let w = v + s;
                    if mask[w] && comp[w] == 0 {
                        comp[w] = count;
                        queue.push_back(w);
                    }
                }
            }
        }
    }
    (comp, count as usize)
}

/// Keeps only the largest component; size ties keep the one whose first
/// voxel comes first in row-major order.
pub fn largest_component(dims: &[usize], mask: &[bool]) -> Vec<bool> {
    let (comp, count) = connected_components(dims, mask);
    if count == 0 {
        return vec![false; mask.len()];
    }
    let mut sizes = vec![0usize; count + 1];
    for &c in &comp {
        sizes[c as usize] += 1;
    }
    // Ids are ordered by first voxel, so the first strict maximum wins ties.
    let best = (1..=count).max_by_key(|&c| (sizes[c], usize::MAX - c)).unwrap() as u32;
    comp.iter().map(|&c| c == best).collect()
}

/// Replaces every foreground class with its largest component, sending the
/// removed voxels to background.
pub fn apply_post_filter(dims: &[usize], labels: &mut [u16], num_classes: u16) {
    for class in 1..num_classes {
        let mask: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let keep = largest_component(dims, &mask);
        for (l, (&was, &kept)) in labels.iter_mut().zip(mask.iter().zip(&keep)) {
            if was && !kept {
                *l = 0;
            }
        }
    }
}

/// Scores a prediction against the reference, one Dice value per class.
pub fn score_prediction(pred: &[u16], truth: &LabelMap) -> Result<Vec<f64>> {
    if pred.len() != truth.labels.len() {
        return Err(CoreError::Shape(format!(
            "prediction has {} voxels, reference has {}",
            pred.len(),
            truth.labels.len()
        )));
    }
    Ok(dice_per_class(pred, &truth.labels, truth.num_classes))
}

/// One scored image/class pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceRow {
    pub image: String,
    pub class: u16,
    pub dice: f64,
}

/// Collected scores, written as a byte-deterministic CSV.
#[derive(Debug, Clone, Default)]
pub struct DiceReport {
    pub rows: Vec<DiceRow>,
}

impl DiceReport {
    pub fn push(&mut self, image: impl Into<String>, class: u16, dice: f64) {
        self.rows.push(DiceRow {
            image: image.into(),
            class,
            dice,
        });
    }

    /// Mean over all rows; NaN-free because Dice always is.
    pub fn mean(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.dice).sum::<f64>() / self.rows.len() as f64
    }

    /// Mean over rows of one class.
    pub fn mean_for_class(&self, class: u16) -> Option<f64> {
        let rows: Vec<f64> = self.rows.iter().filter(|r| r.class == class).map(|r| r.dice).collect();
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().sum::<f64>() / rows.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,class,dice\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6}\n", r.image, r.class, r.dice));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| CoreError::io(path, e))
    }
}

/// Writes an error map as a binary 8-bit PGM, gray `floor(255*E + 0.5)`.
/// Rank-3 maps export one slice along axis 0, chosen by `slice`.
pub fn write_error_map_pgm(path: &Path, dims: &[usize], values: &[f32], slice: Option<usize>) -> Result<()> {
    let n: usize = dims.iter().product();
    if values.len() != n {
        return Err(CoreError::Shape(format!(
            "error map has {} values for dims {dims:?}",
            values.len()
        )));
    }
    let (h, w, plane) = match (dims.len(), slice) {
        (2, None) => (dims[0], dims[1], &values[..]),
        (2, Some(_)) => {
            return Err(CoreError::Invalid("slice index given for a rank-2 map".into()));
        }
        (3, Some(s)) if s < dims[0] => {
            let plane_len = dims[1] * dims[2];
            (dims[1], dims[2], &values[s * plane_len..(s + 1) * plane_len])
        }
        (3, Some(s)) => {
            return Err(CoreError::Invalid(format!(
                "slice {s} out of range for {} slices",
                dims[0]
            )));
        }
        (3, None) => {
            return Err(CoreError::Invalid("rank-3 map needs a slice index".into()));
        }
        (r, _) => {
            return Err(CoreError::Shape(format!("cannot export rank-{r} map")));
        }
    };
    let mut bytes = Vec::with_capacity(32 + plane.len());
    write!(&mut bytes, "P5\n{w} {h}\n255\n").expect("in-memory write");
    bytes.extend(plane.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8));
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}
