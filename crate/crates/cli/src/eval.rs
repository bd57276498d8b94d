//! Confusion-matrix metrics and whole-sequence evaluation.
//!
//! Each point takes the prediction of the voxel it falls in. Ignored labels
//! count toward no metric. A class with no ground-truth and no predicted
//! points is left out of the means.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use mink_core::io::{write_points, PointCloud};
use mink_core::{Matrix, IGNORE_LABEL};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{centered_window, voxelize, Sample};
use crate::error::{CliError, Result};
use crate::model::Model;
use crate::scene::SceneSequence;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    /// Row = ground truth, column = prediction.
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), classes * classes);
        Self { classes, counts }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Count one point; ignored or out-of-range ground truth is skipped.
    pub fn add(&mut self, truth: i32, pred: usize) {
        if truth == IGNORE_LABEL || truth < 0 || truth as usize >= self.classes || pred >= self.classes {
            return;
        }
        self.counts[truth as usize * self.classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    fn truth_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn pred_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    /// `None` when the class is absent from both truth and prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let union = self.truth_total(c) + self.pred_total(c) - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Recall of class `c`; `None` when it has no ground-truth points.
    pub fn class_accuracy(&self, c: usize) -> Option<f64> {
        let total = self.truth_total(c);
        (total > 0).then(|| self.get(c, c) as f64 / total as f64)
    }

    pub fn miou(&self) -> f64 {
        mean((0..self.classes).filter_map(|c| self.iou(c)))
    }

    pub fn macc(&self) -> f64 {
        // Classes present only in predictions count as zero accuracy.
        mean((0..self.classes).filter(|&c| self.iou(c).is_some()).map(|c| self.class_accuracy(c).unwrap_or(0.0)))
    }

    pub fn accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let hit: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-point prediction from the voxel each point fell into.
pub fn propagate(point_to_row: &[u32], voxel_pred: &[usize]) -> Vec<usize> {
    point_to_row.iter().map(|&r| voxel_pred[r as usize]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub method: String,
    pub miou: f64,
    pub macc: f64,
    pub accuracy: f64,
    pub iou: Vec<Option<f64>>,
}

impl MetricsRow {
    fn new(method: impl Into<String>, conf: &Confusion) -> Self {
        Self {
            method: method.into(),
            miou: conf.miou(),
            macc: conf.macc(),
            accuracy: conf.accuracy(),
            iou: (0..conf.classes()).map(|c| conf.iou(c)).collect(),
        }
    }
}

/// Per-frame point predictions of one evaluation pass.
pub type FramePredictions = Vec<Vec<usize>>;

fn method_name(model: &Model) -> String {
    let base = if model.dimension() == 4 { "4D" } else { "3D" };
    if model.crf.is_some() {
        format!("{base}+CRF")
    } else {
        base.to_string()
    }
}

/// Start offset of each frame's points inside a window concatenation.
fn frame_offsets(seq: &SceneSequence, range: std::ops::Range<usize>) -> Vec<usize> {
    let mut offsets = vec![0];
    for f in &seq.frames[range] {
        offsets.push(offsets.last().unwrap() + f.len());
    }
    offsets
}

/// 4D models see the window centered on each frame; 3D models see the frame.
pub fn predict_sequence(cfg: &RunConfig, model: &mut Model, seq: &SceneSequence) -> Result<FramePredictions> {
    let n = seq.frames.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let range = if model.dimension() == 4 {
            centered_window(t, n, cfg.data.window)
        } else {
            t..t + 1
        };
        let offsets = frame_offsets(seq, range.clone());
        let sample = voxelize(&seq.window(range.clone()), cfg.data.voxel_size, model.dimension() == 4)?;
        let pred = model.scores(&sample)?.argmax_rows();
        let points = propagate(&sample.point_to_row, &pred);
        let k = t - range.start;
        out.push(points[offsets[k]..offsets[k + 1]].to_vec());
    }
    Ok(out)
}

/// Per-frame 3D scores, averaged per voxel over the frames of the centered
/// window in which the same voxel is occupied.
pub fn predict_temporal_average(cfg: &RunConfig, model: &mut Model, seq: &SceneSequence) -> Result<FramePredictions> {
    let n = seq.frames.len();
    let mut per_frame: Vec<(Sample, Matrix, HashMap<Vec<i32>, usize>)> = Vec::with_capacity(n);
    for f in &seq.frames {
        let sample = voxelize(f, cfg.data.voxel_size, false)?;
        let scores = model.scores(&sample)?;
        let c = sample.coords();
        let index = (0..c.len()).map(|r| (c.spatial(r).to_vec(), r)).collect();
        per_frame.push((sample, scores, index));
    }
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let (sample, scores, _) = &per_frame[t];
        let c = sample.coords();
        let window = centered_window(t, n, cfg.data.window);
        let pred: Vec<usize> = (0..c.len())
            .map(|r| {
                let key = c.spatial(r);
                let mut acc = scores.row(r).to_vec();
                let mut count = 1.0;
                for u in window.clone().filter(|&u| u != t) {
                    let (_, other, index) = &per_frame[u];
                    if let Some(&row) = index.get(key) {
                        for (a, v) in acc.iter_mut().zip(other.row(row)) {
                            *a += v;
                        }
                        count += 1.0;
                    }
                }
                let avg = Matrix::from_vec(1, acc.len(), acc.into_iter().map(|v| v / count).collect())
                    .expect("one row");
                avg.argmax_rows()[0]
            })
            .collect();
        out.push(propagate(&sample.point_to_row, &pred));
    }
    Ok(out)
}

pub fn confusion(seq: &SceneSequence, preds: &FramePredictions) -> Confusion {
    let mut conf = Confusion::new(seq.classes);
    for (f, p) in seq.frames.iter().zip(preds) {
        for (&l, &q) in f.labels.iter().zip(p) {
            conf.add(l, q);
        }
    }
    conf
}

/// Metric rows for the model, plus temporal averaging for 3D models when enabled.
pub fn evaluate(cfg: &RunConfig, model: &mut Model, seq: &SceneSequence) -> Result<(Vec<MetricsRow>, FramePredictions)> {
    let preds = predict_sequence(cfg, model, seq)?;
    let mut rows = vec![MetricsRow::new(method_name(model), &confusion(seq, &preds))];
    if model.dimension() == 3 && cfg.eval.temporal_average {
        let ta = predict_temporal_average(cfg, model, seq)?;
        rows.push(MetricsRow::new(format!("{}+TA", method_name(model)), &confusion(seq, &ta)));
    }
    Ok((rows, preds))
}

/// One SPG1 file per frame with predicted labels in place of ground truth.
pub fn dump_predictions(dir: &Path, seq: &SceneSequence, preds: &FramePredictions) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (t, (f, p)) in seq.frames.iter().zip(preds).enumerate() {
        let cloud = PointCloud::new(
            3,
            3,
            f.positions.iter().flatten().map(|&v| v as f32).collect(),
            f.colors.iter().flatten().map(|&v| v as f32).collect(),
            Some(p.iter().map(|&c| c as i32).collect()),
        )?;
        let path = dir.join(format!("pred_{t:04}.spg1"));
        write_points(&path, &cloud).map_err(|e| CliError::data(path.display(), e))?;
    }
    Ok(())
}

pub fn write_report(out: &mut impl Write, rows: &[MetricsRow]) -> std::io::Result<()> {
    let classes = rows.first().map_or(0, |r| r.iou.len());
    write!(out, "{:<10} {:>7} {:>7} {:>7}", "method", "mIoU", "mAcc", "acc")?;
    for c in 0..classes {
        write!(out, " {:>7}", format!("iou{c}"))?;
    }
    writeln!(out)?;
    for r in rows {
        write!(out, "{:<10} {:>7.4} {:>7.4} {:>7.4}", r.method, r.miou, r.macc, r.accuracy)?;
        for v in &r.iou {
            match v {
                Some(v) => write!(out, " {v:>7.4}")?,
                None => write!(out, " {:>7}", "-")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_report_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let classes = rows.first().map_or(0, |r| r.iou.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut header = vec!["method".to_string(), "miou".into(), "macc".into(), "accuracy".into()];
    header.extend((0..classes).map(|c| format!("iou{c}")));
    let csv_err = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.method.clone(), r.miou.to_string(), r.macc.to_string(), r.accuracy.to_string()];
        rec.extend(r.iou.iter().map(|v| v.map_or(String::new(), |v| v.to_string())));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
