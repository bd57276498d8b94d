//! Training loop. A worker thread assembles, augments and voxelizes samples
//! into a bounded queue; the optimizer consumes them in order.

use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::mpsc::sync_channel;

use mink_core::autograd::PolySchedule;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::augment;
use crate::config::{Mode, RunConfig};
use crate::data::{sliding_windows, voxelize, Sample};
use crate::error::{CliError, Result};
use crate::model::Model;
use crate::scene::SceneSequence;

const QUEUE_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
}

/// Frame ranges one training sample is drawn from.
pub fn training_units(cfg: &RunConfig, frames: usize) -> Vec<Range<usize>> {
    match cfg.data.mode {
        Mode::PerFrame => (0..frames).map(|t| t..t + 1).collect(),
        Mode::Window => sliding_windows(frames, cfg.data.window, cfg.data.window_stride),
    }
}

fn schedule(cfg: &RunConfig) -> PolySchedule {
    PolySchedule {
        power: cfg.optim.poly_power,
        ..PolySchedule::new(cfg.optim.lr, cfg.optim.iterations)
    }
}

/// Train a fresh model. Identical configs give identical logs.
pub fn train(cfg: &RunConfig, seq: &SceneSequence) -> Result<TrainOutcome> {
    let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let model = Model::build(cfg, cfg.dimension(), seq.classes, &mut model_rng)?;
    train_model(cfg, seq, model)
}

pub fn train_model(cfg: &RunConfig, seq: &SceneSequence, mut model: Model) -> Result<TrainOutcome> {
    let units = training_units(cfg, seq.frames.len());
    if units.is_empty() {
        return Err(CliError::Data("sequence has no frames".into()));
    }
    let iterations = cfg.optim.iterations;
    let sched = schedule(cfg);
    let temporal = cfg.data.mode == Mode::Window;
    let (tx, rx) = sync_channel::<Result<Sample>>(QUEUE_DEPTH);

    let mut log = Vec::with_capacity(iterations);
    std::thread::scope(|scope| -> Result<()> {
        let units = &units;
        scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
            rng.set_stream(1);
            let mut order: Vec<usize> = Vec::new();
            for _ in 0..iterations {
                if order.is_empty() {
                    order = (0..units.len()).collect();
                    order.shuffle(&mut rng);
                }
                let unit = units[order.pop().expect("refilled")].clone();
                let mut points = seq.window(unit);
                augment(&mut points, &cfg.augment, &mut rng);
                if tx.send(voxelize(&points, cfg.data.voxel_size, temporal)).is_err() {
                    break;
                }
            }
        });
        // Owned here so an early error unblocks the producer.
        let rx = rx;
        for iteration in 0..iterations {
            let sample = rx.recv().expect("producer sends one sample per iteration")?;
            let lr = sched.lr(iteration);
            let loss = model.step(&sample, lr, cfg.optim.momentum)?;
            log.push(LogRow { iteration, loss, lr });
        }
        Ok(())
    })?;
    Ok(TrainOutcome { model, log })
}

pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for row in log {
        w.serialize(row).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Loss summary every `every` iterations, for progress output.
pub fn print_progress(out: &mut impl Write, log: &[LogRow], every: usize) -> std::io::Result<()> {
    for row in log.iter().filter(|r| r.iteration % every.max(1) == 0 || r.iteration + 1 == log.len()) {
        writeln!(out, "iter {:>5}  loss {:.5}  lr {:.5}", row.iteration, row.loss, row.lr)?;
    }
    Ok(())
}
