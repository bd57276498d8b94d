//! From point sets to voxel tensors.

use std::ops::Range;
use std::sync::Arc;

use mink_core::coords::{quantize_batched, FeatureReduction, QuantizeOptions};
use mink_core::{CoordinateMap, Matrix, SparseTensor};

use crate::error::Result;
use crate::scene::Points;

/// A voxelized point set ready for a forward pass.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Centered colors in `[−0.5, 0.5]`, averaged per voxel.
    pub tensor: SparseTensor,
    /// Per-row label, `IGNORE_LABEL` where member points disagree.
    pub labels: Vec<i32>,
    pub point_to_row: Vec<u32>,
    /// Mean RGB per row in `0..=255`.
    pub colors: Matrix,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn coords(&self) -> &Arc<CoordinateMap> {
        self.tensor.coords()
    }

    /// Keep only `rows`, in the given order. Point mappings are dropped.
    pub fn subset(&self, rows: &[u32]) -> Result<Sample> {
        let c = self.coords();
        let keys: Vec<i32> = rows.iter().flat_map(|&r| c.key(r as usize).to_vec()).collect();
        let coords = CoordinateMap::from_keys(c.dimension(), c.tensor_stride().to_vec(), keys)?;
        Ok(Sample {
            tensor: SparseTensor::new(Arc::new(coords), self.tensor.features().gather_rows(rows))?,
            labels: rows.iter().map(|&r| self.labels[r as usize]).collect(),
            point_to_row: Vec::new(),
            colors: self.colors.gather_rows(rows),
        })
    }
}

/// Floor-quantize `points` at `voxel_size`. With `temporal`, each point's
/// frame time becomes a fourth coordinate with unit step.
pub fn voxelize(points: &Points, voxel_size: f64, temporal: bool) -> Result<Sample> {
    let n = points.len();
    let d = if temporal { 4 } else { 3 };
    // Positions are pre-divided so time keeps an exact unit step.
    let coords = Matrix::from_fn(n, d, |r, c| {
        if c < 3 {
            points.positions[r][c] / voxel_size
        } else {
            points.times[r] as f64
        }
    });
    let colors = Matrix::from_fn(n, 3, |r, c| points.colors[r][c]);
    let opts = QuantizeOptions {
        voxel_size: 1.0,
        reduction: FeatureReduction::Average,
    };
    let q = quantize_batched(&coords, &colors, Some(&points.labels), None, opts)?;
    let (coords, colors) = q.tensor.into_parts();
    let features = colors.map(|v| v / 255.0 - 0.5);
    Ok(Sample {
        tensor: SparseTensor::new(coords, features)?,
        labels: q.labels.expect("labels supplied"),
        point_to_row: q.point_to_row,
        colors,
    })
}

/// Training windows of `len` frames starting every `stride` frames. A
/// sequence shorter than `len` yields one window over all of it.
pub fn sliding_windows(frames: usize, len: usize, stride: usize) -> Vec<Range<usize>> {
    if frames == 0 {
        return Vec::new();
    }
    if frames <= len {
        return vec![0..frames];
    }
    (0..=frames - len).step_by(stride.max(1)).map(|s| s..s + len).collect()
}

/// Window of `len` frames around frame `t`, shifted to stay inside the sequence.
pub fn centered_window(t: usize, frames: usize, len: usize) -> Range<usize> {
    let len = len.min(frames);
    let start = t.saturating_sub(len / 2).min(frames - len);
    start..start + len
}

#[cfg(test)]
mod tests {
    use super::*;
    use mink_core::IGNORE_LABEL;

    fn points() -> Points {
        Points {
            positions: vec![[0.1, 0.1, 0.1], [0.2, 0.3, 0.1], [0.1, 0.1, 0.1], [1.4, 0.0, 0.0]],
            colors: vec![[255.0, 0.0, 0.0], [0.0, 0.0, 0.0], [255.0, 0.0, 0.0], [0.0, 255.0, 0.0]],
            labels: vec![1, 2, 1, 0],
            times: vec![0, 0, 1, 1],
        }
    }

    #[test]
    fn per_frame_voxels_merge_across_time() {
        let s = voxelize(&points(), 0.5, false).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.labels, vec![IGNORE_LABEL, 0]);
        assert_eq!(s.colors.row(0), &[170.0, 0.0, 0.0]);
        assert_eq!(s.point_to_row, vec![0, 0, 0, 1]);
        assert!((s.tensor.features().get(0, 0) - (170.0 / 255.0 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn temporal_voxels_keep_frames_apart() {
        let s = voxelize(&points(), 0.5, true).unwrap();
        assert_eq!(s.coords().dimension(), 4);
        assert_eq!(s.len(), 3);
        let times: Vec<i32> = (0..s.len()).map(|r| s.coords().spatial(r)[3]).collect();
        assert_eq!(times, vec![0, 1, 1]);
        assert_eq!(s.labels, vec![IGNORE_LABEL, 1, 0]);
    }

    #[test]
    fn windows() {
        assert_eq!(sliding_windows(5, 3, 1), vec![0..3, 1..4, 2..5]);
        assert_eq!(sliding_windows(6, 3, 2), vec![0..3, 2..5]);
        assert_eq!(sliding_windows(2, 3, 1), vec![0..2]);
        assert_eq!(centered_window(0, 8, 3), 0..3);
        assert_eq!(centered_window(4, 8, 3), 3..6);
        assert_eq!(centered_window(7, 8, 3), 5..8);
        assert_eq!(centered_window(1, 2, 5), 0..2);
    }

    #[test]
    fn subset_keeps_rows_in_order() {
        let s = voxelize(&points(), 0.5, true).unwrap();
        let sub = s.subset(&[2, 0]).unwrap();
        assert_eq!(sub.labels, vec![0, IGNORE_LABEL]);
        assert_eq!(sub.coords().key(0), s.coords().key(2));
    }
}
