//! A segmentation network with an optional stationary CRF on its logits.

use std::path::Path;
use std::sync::Arc;

use mink_core::autograd::{decode_checkpoint, encode_checkpoint, sgd_step, ParamId, Tape, ValueId};
use mink_core::crf::{lift_on_tape, lift_to_trilateral, ts_crf_on_tape, CompatibilityKernel, TrilateralSteps};
use mink_core::net::{build_minknet, build_minkunet, Network};
use mink_core::{Matrix, IGNORE_LABEL};
use rand::Rng;

use crate::config::{Arch, CrfConfig, RunConfig};
use crate::data::Sample;
use crate::error::{CliError, Result};

/// Input features per voxel: centered RGB.
pub const IN_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub struct CrfHead {
    pub param: ParamId,
    pub kernel: CompatibilityKernel,
    pub iterations: usize,
    pub steps: TrilateralSteps,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub crf: Option<CrfHead>,
}

impl Model {
    pub fn build(cfg: &RunConfig, dimension: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let net_cfg = cfg.network(dimension, IN_CHANNELS, classes)?;
        let net = match cfg.net.arch {
            Arch::Unet => build_minkunet(&net_cfg, rng)?,
            Arch::Resnet => build_minknet(&net_cfg, rng)?,
        };
        let mut model = Self { net, crf: None };
        if cfg.crf.enabled {
            model.attach_crf(&cfg.crf, classes)?;
        }
        Ok(model)
    }

    /// Add a zero-initialized CRF; its weights join the network's parameters.
    pub fn attach_crf(&mut self, cfg: &CrfConfig, classes: usize) -> Result<()> {
        let kernel = CompatibilityKernel::new(classes)?;
        let param = kernel.register(self.net.params_mut())?;
        self.crf = Some(CrfHead {
            param,
            kernel,
            iterations: cfg.iterations,
            steps: TrilateralSteps {
                space: cfg.space_step,
                chroma: cfg.chroma_step,
                time: cfg.time_step,
            },
        });
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.net.dimension()
    }

    /// Record per-row scores: logits, or CRF marginals when a CRF is attached.
    pub fn record(&mut self, tape: &mut Tape, sample: &Sample, training: bool) -> Result<ValueId> {
        let x = tape.leaf(sample.tensor.features().clone());
        self.record_input(tape, x, sample, training)
    }

    /// As [`Model::record`], with `x` standing in for the sample's features.
    pub fn record_input(&mut self, tape: &mut Tape, x: ValueId, sample: &Sample, training: bool) -> Result<ValueId> {
        let out = self.net.forward(tape, sample.coords().clone(), x, training)?;
        let Some(crf) = &self.crf else {
            return Ok(out.logits);
        };
        let logits = tape.value(out.logits)?.clone();
        let lifted = lift_to_trilateral(sample.coords(), &logits, &sample.colors, None, crf.steps)?;
        let unary = lift_on_tape(tape, out.logits, &lifted)?;
        let neighbors = Arc::new(crf.kernel.neighbor_map(&lifted.coords)?);
        let q = ts_crf_on_tape(tape, unary, self.net.params(), crf.param, neighbors, crf.iterations)?;
        Ok(tape.gather(q, lifted.node_of_row())?)
    }

    pub fn loss(&mut self, tape: &mut Tape, sample: &Sample) -> Result<ValueId> {
        let x = tape.leaf(sample.tensor.features().clone());
        self.loss_input(tape, x, sample)
    }

    pub fn loss_input(&mut self, tape: &mut Tape, x: ValueId, sample: &Sample) -> Result<ValueId> {
        let scores = self.record_input(tape, x, sample, true)?;
        Ok(if self.crf.is_some() {
            tape.nll_of_probs(scores, &sample.labels, IGNORE_LABEL)?
        } else {
            tape.cross_entropy(scores, &sample.labels, IGNORE_LABEL)?
        })
    }

    /// One momentum-SGD step; returns the loss before the update.
    pub fn step(&mut self, sample: &Sample, lr: f64, momentum: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, sample)?;
        let value = tape.value(loss)?.get(0, 0);
        self.net.params_mut().zero_grad();
        tape.backward(loss, self.net.params_mut())?;
        sgd_step(self.net.params_mut(), lr, momentum);
        Ok(value)
    }

    /// Evaluation-mode scores, one row per voxel.
    pub fn scores(&mut self, sample: &Sample) -> Result<Matrix> {
        let mut tape = Tape::new();
        let s = self.record(&mut tape, sample, false)?;
        Ok(tape.value(s)?.clone())
    }

    /// Fraction of labeled voxels whose arg-max score matches.
    pub fn voxel_accuracy(&mut self, sample: &Sample) -> Result<f64> {
        let pred = self.scores(sample)?.argmax_rows();
        let (mut hit, mut total) = (0usize, 0usize);
        for (p, &l) in pred.iter().zip(&sample.labels) {
            if l != IGNORE_LABEL {
                total += 1;
                hit += usize::from(*p as i32 == l);
            }
        }
        Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(&self.net.state_blobs());
        std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let blobs = decode_checkpoint(&bytes).map_err(|e| CliError::data(path.display(), e))?;
        self.net
            .load_state_blobs(&blobs)
            .map_err(|e| CliError::data(format!("{} does not fit the configured network", path.display()), e))
    }
}
