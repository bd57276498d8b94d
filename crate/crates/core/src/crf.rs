//! Stationary CRF over 7D space-chroma-time nodes.
//!
//! Node coordinates are `[x, y, z, r, g, b, t]`, each axis quantized with its
//! own step. Mean-field inference runs a fixed number of updates
//!
//! ```text
//! Q⁰ = softmax(φ_u)
//! Qⁿ = softmax(φ_u + conv(Qⁿ⁻¹, φ_p))
//! ```
//!
//! where the convolution uses one `C × C` compatibility matrix per neighbor
//! offset, shared across all positions.

use std::sync::Arc;

use crate::autograd::{ParamId, ParamStore, Tape, ValueId};
use crate::coords::CoordinateMap;
use crate::error::{Error, Result};
use crate::kernel::{build_kernel_map, KernelMap, KernelRegion};
use crate::matrix::Matrix;
use crate::sparse_ops::{self, ConvWeights};

pub const CRF_DIMENSION: usize = 7;
pub const DEFAULT_ITERATIONS: usize = 3;
/// Checkpoint name of the compatibility weights.
pub const PAIRWISE_PARAM: &str = "crf.pairwise";

/// Quantization steps of the three axis groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrilateralSteps {
    pub space: f64,
    pub chroma: f64,
    pub time: f64,
}

impl Default for TrilateralSteps {
    fn default() -> Self {
        Self {
            space: 1.0,
            chroma: 25.0,
            time: 1.0,
        }
    }
}

/// CRF nodes produced from voxel rows.
#[derive(Debug, Clone)]
pub struct Lifted {
    pub coords: Arc<CoordinateMap>,
    /// Node of each input row, as a single-offset averaging map.
    pub merge: Arc<KernelMap>,
    /// Averaged unary potentials, one row per node.
    pub unary: Matrix,
}

impl Lifted {
    /// Node index of every input row.
    pub fn node_of_row(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.merge.n_in()];
        let e = &self.merge.entries()[0];
        for (&i, &o) in e.input.iter().zip(&e.output) {
            out[i as usize] = o;
        }
        out
    }
}

fn quantize_axis(v: f64, step: f64, row: usize, what: &'static str) -> Result<i32> {
    if !v.is_finite() {
        return Err(Error::NonFinite { row, what });
    }
    let q = (v / step).floor();
    if q < i32::MIN as f64 || q > i32::MAX as f64 {
        return Err(Error::CoordinateOverflow { row, value: q });
    }
    Ok(q as i32)
}

/// Lift voxel rows into trilateral nodes.
///
/// `coords` is 3D (times come from `times`, or 0) or 4D (time is the last
/// axis). Space uses the stored voxel coordinates, chroma the `N × 3` colors.
/// Rows landing on the same 7D coordinate merge and their logits average.
pub fn lift_to_trilateral(
    coords: &CoordinateMap,
    logits: &Matrix,
    colors: &Matrix,
    times: Option<&[i32]>,
    steps: TrilateralSteps,
) -> Result<Lifted> {
    let n = coords.len();
    let d = coords.dimension();
    if d != 3 && d != 4 {
        return Err(Error::DimensionMismatch { expected: 4, got: d });
    }
    for (what, rows) in [("logits", logits.rows()), ("colors", colors.rows())] {
        if rows != n {
            return Err(Error::ShapeMismatch {
                what: format!("{what} vs coordinates"),
                expected: vec![n],
                got: vec![rows],
            });
        }
    }
    if colors.cols() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            got: colors.cols(),
        });
    }
    if let Some(t) = times {
        if t.len() != n {
            return Err(Error::ShapeMismatch {
                what: "times vs coordinates".into(),
                expected: vec![n],
                got: vec![t.len()],
            });
        }
    }
    for (what, s) in [("space", steps.space), ("chroma", steps.chroma), ("time", steps.time)] {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!("{what} step must be positive, got {s}")));
        }
    }

    let width = CRF_DIMENSION + 1;
    let mut keys = Vec::with_capacity(n * width);
    for r in 0..n {
        let sp = coords.spatial(r);
        keys.push(coords.batch(r) as i32);
        for &v in &sp[..3] {
            keys.push(quantize_axis(v as f64, steps.space, r, "position")?);
        }
        for &v in colors.row(r) {
            keys.push(quantize_axis(v, steps.chroma, r, "color")?);
        }
        let t = if d == 4 {
            sp[3] as f64
        } else {
            times.map_or(0.0, |t| t[r] as f64)
        };
        keys.push(quantize_axis(t, steps.time, r, "time")?);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[a * width..(a + 1) * width].cmp(&keys[b * width..(b + 1) * width]));
    let mut node_keys = Vec::new();
    let mut target = vec![0u32; n];
    let mut nodes = 0u32;
    for (i, &r) in order.iter().enumerate() {
        let key = &keys[r * width..(r + 1) * width];
        if i == 0 || key != &keys[order[i - 1] * width..order[i - 1] * width + width] {
            node_keys.extend_from_slice(key);
            nodes += 1;
        }
        target[r] = nodes - 1;
    }
    let coords7 = CoordinateMap::from_keys(CRF_DIMENSION, vec![1; CRF_DIMENSION], node_keys)?;
    let merge = KernelMap::from_assignment(CRF_DIMENSION, nodes as usize, &target)?;
    let unary = sparse_ops::avg_pool(logits, &merge)?;
    Ok(Lifted {
        coords: Arc::new(coords7),
        merge: Arc::new(merge),
        unary,
    })
}

/// Per-offset `C × C` compatibility matrices over a 7D neighborhood that
/// excludes offset 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityKernel {
    region: KernelRegion,
    weights: ConvWeights<f64>,
}

impl CompatibilityKernel {
    /// Size-3 hypercross without its center (14 offsets), all weights zero.
    pub fn new(classes: usize) -> Result<Self> {
        Self::with_region(KernelRegion::hypercross(CRF_DIMENSION, 3)?, classes)
    }

    pub fn with_region(region: KernelRegion, classes: usize) -> Result<Self> {
        if region.dimension() != CRF_DIMENSION {
            return Err(Error::DimensionMismatch {
                expected: CRF_DIMENSION,
                got: region.dimension(),
            });
        }
        let region = region.without_center()?;
        let weights = ConvWeights::zeros(region.volume(), classes, classes);
        Ok(Self { region, weights })
    }

    pub fn region(&self) -> &KernelRegion {
        &self.region
    }

    pub fn classes(&self) -> usize {
        self.weights.c_out()
    }

    pub fn weights(&self) -> &ConvWeights<f64> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ConvWeights<f64> {
        &mut self.weights
    }

    /// `φ_p(a, b)` at neighbor offset index `k`.
    pub fn set(&mut self, k: usize, a: usize, b: usize, value: f64) {
        let c = self.classes();
        self.weights.as_mut_slice()[(k * c + a) * c + b] = value;
    }

    /// Register the weights in `store` under [`PAIRWISE_PARAM`].
    pub fn register(&self, store: &mut ParamStore) -> Result<ParamId> {
        let c = self.classes();
        store.add(crate::autograd::Parameter::new(
            PAIRWISE_PARAM,
            vec![self.region.volume(), c, c],
            self.weights.as_slice().to_vec(),
        )?)
    }

    /// Copy the current value of the registered parameter back in.
    pub fn load_from(&mut self, store: &ParamStore, id: ParamId) -> Result<()> {
        let p = store.get(id);
        if p.value.len() != self.weights.as_slice().len() {
            let c = self.classes();
            return Err(Error::ShapeMismatch {
                what: format!("parameter `{}`", p.name),
                expected: vec![self.region.volume(), c, c],
                got: p.dims.clone(),
            });
        }
        self.weights.as_mut_slice().copy_from_slice(&p.value);
        Ok(())
    }

    /// Neighbor pairs on a node set.
    pub fn neighbor_map(&self, coords: &CoordinateMap) -> Result<KernelMap> {
        build_kernel_map(coords, coords, &self.region)
    }
}

/// Mean-field inference returning `Q^N`, one probability row per node.
pub fn ts_crf_infer(
    unary: &Matrix,
    coords: &CoordinateMap,
    kernel: &CompatibilityKernel,
    iterations: usize,
) -> Result<Matrix> {
    if unary.rows() != coords.len() {
        return Err(Error::ShapeMismatch {
            what: "unary rows vs nodes".into(),
            expected: vec![coords.len()],
            got: vec![unary.rows()],
        });
    }
    if unary.cols() != kernel.classes() {
        return Err(Error::ChannelMismatch {
            expected: kernel.classes(),
            got: unary.cols(),
        });
    }
    let mut q = sparse_ops::softmax_rows(unary);
    if iterations == 0 {
        return Ok(q);
    }
    let map = kernel.neighbor_map(coords)?;
    for _ in 0..iterations {
        let mut energy = sparse_ops::sparse_conv_forward(&q, kernel.weights(), &map, coords.len())?;
        energy.add_assign(unary);
        q = sparse_ops::softmax_rows(&energy);
    }
    Ok(q)
}

/// Record the unrolled inference on `tape`. Backpropagating through the
/// result yields gradients for both the unary input and the pairwise
/// parameter, summed over every iteration.
pub fn ts_crf_on_tape(
    tape: &mut Tape,
    unary: ValueId,
    params: &ParamStore,
    pairwise: ParamId,
    neighbors: Arc<KernelMap>,
    iterations: usize,
) -> Result<ValueId> {
    let mut q = tape.softmax(unary)?;
    for _ in 0..iterations {
        let message = tape.conv(q, params, pairwise, neighbors.clone())?;
        let energy = tape.add(unary, message)?;
        q = tape.softmax(energy)?;
    }
    Ok(q)
}

/// Record lifting on `tape`: per-node averages of the row logits.
pub fn lift_on_tape(tape: &mut Tape, logits: ValueId, lifted: &Lifted) -> Result<ValueId> {
    tape.avg_pool(logits, lifted.merge.clone())
}
