//! Human-readable statistics for point files, sequences and voxelizations.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use mink_core::io::read_points;
use mink_core::IGNORE_LABEL;

use crate::data::voxelize;
use crate::error::{CliError, Result};
use crate::scene::{read_sequence, Points, SceneSequence, MANIFEST};

fn histogram(labels: &[i32]) -> BTreeMap<i32, usize> {
    let mut h = BTreeMap::new();
    for &l in labels {
        *h.entry(l).or_insert(0) += 1;
    }
    h
}

fn describe_points(s: &mut String, p: &Points, voxel_size: Option<f64>) -> Result<()> {
    let _ = writeln!(s, "points: {}", p.len());
    if p.is_empty() {
        return Ok(());
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for q in &p.positions {
        for a in 0..3 {
            lo[a] = lo[a].min(q[a]);
            hi[a] = hi[a].max(q[a]);
        }
    }
    let _ = writeln!(s, "bounds: [{:.3}, {:.3}, {:.3}] .. [{:.3}, {:.3}, {:.3}]", lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]);
    let _ = writeln!(s, "labels: {:?}", histogram(&p.labels));
    if let Some(v) = voxel_size {
        let sample = voxelize(p, v, false)?;
        let ignored = sample.labels.iter().filter(|&&l| l == IGNORE_LABEL).count();
        let _ = writeln!(
            s,
            "voxels at {v}: {} ({:.2} points each, {ignored} with conflicting labels)",
            sample.len(),
            p.len() as f64 / sample.len().max(1) as f64
        );
    }
    Ok(())
}

fn describe_sequence(s: &mut String, seq: &SceneSequence, voxel_size: Option<f64>) -> Result<()> {
    let _ = writeln!(s, "frames: {}  classes: {}", seq.frames.len(), seq.classes);
    for (t, f) in seq.frames.iter().enumerate() {
        let _ = writeln!(s, "-- frame {t}");
        describe_points(s, f, voxel_size)?;
    }
    if let Some(v) = voxel_size {
        let all = seq.window(0..seq.frames.len());
        let sample = voxelize(&all, v, true)?;
        let _ = writeln!(s, "4D voxels over all frames: {}", sample.len());
    }
    Ok(())
}

/// Report on a sequence directory or a single SPG1 file.
pub fn inspect_path(path: &Path, voxel_size: Option<f64>) -> Result<String> {
    let mut s = String::new();
    if path.is_dir() {
        if !path.join(MANIFEST).exists() {
            return Err(CliError::Data(format!("{}: no {MANIFEST}", path.display())));
        }
        describe_sequence(&mut s, &read_sequence(path)?, voxel_size)?;
        return Ok(s);
    }
    let cloud = read_points(path).map_err(|e| CliError::data(path.display(), e))?;
    let _ = writeln!(s, "dimension: {}  features: {}", cloud.dimension, cloud.n_features);
    if cloud.dimension == 3 {
        let n = cloud.len();
        let triple = |v: &[f32]| [v[0] as f64, v[1] as f64, v[2] as f64];
        let colors = if cloud.n_features == 3 {
            (0..n).map(|i| triple(cloud.feature(i))).collect()
        } else {
            vec![[0.0; 3]; n]
        };
        let p = Points {
            positions: (0..n).map(|i| triple(cloud.position(i))).collect(),
            colors,
            labels: cloud.labels.clone().unwrap_or_else(|| vec![IGNORE_LABEL; n]),
            times: vec![0; n],
        };
        describe_points(&mut s, &p, voxel_size)?;
    } else {
        let _ = writeln!(s, "points: {}", cloud.len());
    }
    Ok(s)
}
