//! Residual and U-shaped sparse networks built from a flat layer list.
//!
//! A network is a sequence of [`LayerSpec`]s run in order over one current
//! sparse tensor. Strided layers remember the coordinates and features they
//! leave behind, keyed by tensor stride; transposed convolutions restore
//! those coordinates exactly and skip-concat layers read those features.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{NamedBlob, ParamId, ParamStore, Tape, ValueId};
use crate::coords::{check_dimension, CoordinateMap, SparseTensor};
use crate::error::{Error, Result};
use crate::kernel::{build_kernel_map, build_transposed_kernel_map, enumerate_offsets, KernelMap, KernelRegion, KernelShape};
use crate::sparse_ops::{global_pool_map, BatchNormStats};

/// Kernel shape used by the 3-wide convolutions of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelPolicy {
    Hypercube,
    Hypercross,
    /// Cube over the leading axes, cross along the last (time) axis.
    Hybrid,
}

impl std::str::FromStr for KernelPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hypercube" | "cube" => Ok(Self::Hypercube),
            "hypercross" | "cross" => Ok(Self::Hypercross),
            "hybrid" => Ok(Self::Hybrid),
            _ => Err(Error::InvalidArgument(format!("unknown kernel policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Per-voxel logits on the input coordinates.
    Segmentation,
    /// One logit row per batch.
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub dimension: usize,
    pub in_channels: usize,
    pub classes: usize,
    /// Width of stage 0; stage `s` has `base_width << s` channels.
    pub base_width: usize,
    /// Residual blocks per stage. Every stage after the first halves resolution.
    pub blocks: Vec<usize>,
    /// Per-stage kernel shape; the last entry repeats for remaining stages.
    pub kernel_policy: Vec<KernelPolicy>,
    pub kernel_size: u32,
    pub stem_size: u32,
    /// Treat the last axis as time: the stem does not extend along it.
    pub temporal: bool,
    pub head: Head,
}

impl NetworkConfig {
    pub fn new(dimension: usize, in_channels: usize, classes: usize) -> Self {
        Self {
            dimension,
            in_channels,
            classes,
            base_width: 8,
            blocks: vec![1, 1],
            kernel_policy: vec![KernelPolicy::Hypercube],
            kernel_size: 3,
            stem_size: 5,
            temporal: dimension == 4,
            head: Head::Segmentation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dimension(self.dimension)?;
        let positive = [
            ("in_channels", self.in_channels),
            ("classes", self.classes),
            ("base_width", self.base_width),
            ("stages", self.blocks.len()),
            ("kernel_policy entries", self.kernel_policy.len()),
        ];
        for (what, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{what} must be positive")));
            }
        }
        if self.temporal && self.dimension < 2 {
            return Err(Error::InvalidArgument("a temporal axis needs D ≥ 2".into()));
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn policy(&self, stage: usize) -> KernelPolicy {
        self.kernel_policy[stage.min(self.kernel_policy.len() - 1)]
    }

    pub fn stage_region(&self, stage: usize) -> Result<KernelRegion> {
        let d = self.dimension;
        let k = self.kernel_size;
        match self.policy(stage) {
            KernelPolicy::Hypercube => KernelRegion::hypercube(d, k),
            KernelPolicy::Hypercross => KernelRegion::hypercross(d, k),
            KernelPolicy::Hybrid => {
                if d < 2 {
                    return Err(Error::InvalidKernel("hybrid kernels need D ≥ 2".into()));
                }
                KernelRegion::hybrid(&vec![k; d - 1], k)
            }
        }
    }

    pub fn stem_region(&self) -> Result<KernelRegion> {
        let d = self.dimension;
        let mut size = vec![self.stem_size; d];
        if self.temporal {
            size[d - 1] = 1;
        }
        enumerate_offsets(KernelShape::Hypercube, &size, d, &vec![1; d])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
    GlobalAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    TransposedConv,
    Pool(PoolKind),
    BatchNorm,
    Relu,
    ResidualBlock,
    SkipConcat,
}

/// One layer of a network. `stride` > 1 on a conv or pool downsamples with
/// a `{0..stride-1}^D` window; on a transposed conv it upsamples back onto
/// the coordinates recorded at the finer stride.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub region: Option<KernelRegion>,
    pub stride: u32,
    pub c_in: usize,
    pub c_out: usize,
    pub bias: bool,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kind: LayerKind, c_in: usize, c_out: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            region: None,
            stride: 1,
            c_in,
            c_out,
            bias: false,
        }
    }

    pub fn conv(name: impl Into<String>, region: KernelRegion, c_in: usize, c_out: usize) -> Self {
        Self {
            region: Some(region),
            ..Self::new(name, LayerKind::Conv, c_in, c_out)
        }
    }

    pub fn strided_conv(name: impl Into<String>, stride: u32, c_in: usize, c_out: usize) -> Self {
        Self {
            stride,
            ..Self::new(name, LayerKind::Conv, c_in, c_out)
        }
    }

    pub fn transposed_conv(name: impl Into<String>, stride: u32, c_in: usize, c_out: usize) -> Self {
        Self {
            stride,
            ..Self::new(name, LayerKind::TransposedConv, c_in, c_out)
        }
    }

    pub fn pool(name: impl Into<String>, kind: PoolKind, stride: u32, channels: usize) -> Self {
        Self {
            stride,
            ..Self::new(name, LayerKind::Pool(kind), channels, channels)
        }
    }

    pub fn batch_norm(name: impl Into<String>, channels: usize) -> Self {
        Self::new(name, LayerKind::BatchNorm, channels, channels)
    }

    pub fn relu(channels: usize) -> Self {
        Self::new("relu", LayerKind::Relu, channels, channels)
    }

    pub fn residual(name: impl Into<String>, region: KernelRegion, c_in: usize, c_out: usize) -> Self {
        Self {
            region: Some(region),
            ..Self::new(name, LayerKind::ResidualBlock, c_in, c_out)
        }
    }

    /// Concatenate the encoder features recorded at the current stride.
    /// `c_in` is the current width, `c_out` the width after concatenation.
    pub fn skip_concat(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self::new(name, LayerKind::SkipConcat, c_in, c_out)
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    fn effective_region(&self, dimension: usize) -> Result<KernelRegion> {
        match &self.region {
            Some(r) => Ok(r.clone()),
            None if self.stride > 1 => KernelRegion::stride_window(dimension, self.stride),
            None => KernelRegion::identity(dimension),
        }
    }
}

#[derive(Debug, Clone)]
struct ConvParams {
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct NormParams {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Debug, Clone)]
enum Bound {
    Conv(ConvParams),
    Norm(NormParams),
    Residual {
        conv1: ConvParams,
        bn1: NormParams,
        conv2: ConvParams,
        bn2: NormParams,
        projection: Option<(ConvParams, NormParams)>,
    },
    None,
}

#[derive(Debug, Clone)]
pub struct Network {
    dimension: usize,
    in_channels: usize,
    out_channels: usize,
    head: Head,
    layers: Vec<LayerSpec>,
    regions: Vec<KernelRegion>,
    bound: Vec<Bound>,
    params: ParamStore,
    stats: Vec<BatchNormStats>,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub logits: ValueId,
    /// Coordinates of the logit rows: the input coordinates for segmentation,
    /// one row per batch for classification.
    pub coords: Arc<CoordinateMap>,
}

type MapKey = (Vec<u32>, Vec<u32>, Vec<i32>, u8);

struct ForwardState {
    coords: Arc<CoordinateMap>,
    value: ValueId,
    /// Encoder coordinates and features by tensor stride.
    saved: HashMap<Vec<u32>, (Arc<CoordinateMap>, ValueId)>,
    maps: HashMap<MapKey, Arc<KernelMap>>,
}

impl ForwardState {
    fn map(
        &mut self,
        c_in: &CoordinateMap,
        c_out: &CoordinateMap,
        region: &KernelRegion,
        transposed: bool,
    ) -> Result<Arc<KernelMap>> {
        let key = (
            c_in.tensor_stride().to_vec(),
            c_out.tensor_stride().to_vec(),
            region.offsets().flatten().copied().collect(),
            transposed as u8,
        );
        if let Some(m) = self.maps.get(&key) {
            if m.n_in() == c_in.len() && m.n_out() == c_out.len() {
                return Ok(m.clone());
            }
        }
        let m = Arc::new(if transposed {
            build_transposed_kernel_map(c_in, c_out, region)?
        } else {
            build_kernel_map(c_in, c_out, region)?
        });
        self.maps.insert(key, m.clone());
        Ok(m)
    }
}

impl Network {
    /// Bind parameters for `layers`, checking that channels chain.
    pub fn from_layers(
        dimension: usize,
        in_channels: usize,
        head: Head,
        layers: Vec<LayerSpec>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_dimension(dimension)?;
        let mut params = ParamStore::new();
        let mut stats = Vec::new();
        let mut regions = Vec::new();
        let mut bound = Vec::new();
        let mut width = in_channels;
        let mut depth: i64 = 0;
        let mut pooled = false;

        fn add_conv(
            params: &mut ParamStore,
            name: &str,
            region: &KernelRegion,
            c_in: usize,
            c_out: usize,
            bias: bool,
            rng: &mut impl Rng,
        ) -> Result<ConvParams> {
            let weight = params.add_conv(format!("{name}.weight"), region.volume(), c_out, c_in, rng)?;
            let bias = if bias {
                Some(params.add_filled(format!("{name}.bias"), vec![c_out], 0.0)?)
            } else {
                None
            };
            Ok(ConvParams { weight, bias })
        }

        fn add_norm(
            params: &mut ParamStore,
            stats: &mut Vec<BatchNormStats>,
            name: &str,
            channels: usize,
        ) -> Result<NormParams> {
            let gamma = params.add_filled(format!("{name}.gamma"), vec![channels], 1.0)?;
            let beta = params.add_filled(format!("{name}.beta"), vec![channels], 0.0)?;
            stats.push(BatchNormStats::new(channels));
            Ok(NormParams {
                gamma,
                beta,
                stats: stats.len() - 1,
            })
        }

        for layer in &layers {
            if layer.c_in != width {
                return Err(Error::InvalidArgument(format!(
                    "layer `{}` expects {} input channels but receives {width}",
                    layer.name, layer.c_in
                )));
            }
            if layer.c_out == 0 {
                return Err(Error::InvalidArgument(format!("layer `{}` has no output channels", layer.name)));
            }
            if layer.stride == 0 {
                return Err(Error::InvalidArgument(format!("layer `{}` has stride 0", layer.name)));
            }
            let region = layer.effective_region(dimension)?;
            if region.dimension() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    got: region.dimension(),
                });
            }
            if pooled && layer.kind != LayerKind::Conv {
                return Err(Error::InvalidArgument(format!(
                    "layer `{}` follows a global pool; only pointwise convs may",
                    layer.name
                )));
            }
            let b = match layer.kind {
                LayerKind::Conv | LayerKind::TransposedConv => {
                    if layer.kind == LayerKind::TransposedConv {
                        if layer.stride < 2 {
                            return Err(Error::InvalidArgument(format!(
                                "transposed conv `{}` needs stride ≥ 2",
                                layer.name
                            )));
                        }
                        depth -= 1;
                        if depth < 0 {
                            return Err(Error::InvalidArgument(format!(
                                "transposed conv `{}` has no recorded encoder coordinates",
                                layer.name
                            )));
                        }
                    } else if layer.stride > 1 {
                        depth += 1;
                    }
                    if pooled && region.volume() != 1 {
                        return Err(Error::InvalidArgument(format!(
                            "conv `{}` after a global pool must be pointwise",
                            layer.name
                        )));
                    }
                    Bound::Conv(add_conv(&mut params, &layer.name, &region, layer.c_in, layer.c_out, layer.bias, rng)?)
                }
                LayerKind::Pool(kind) => {
                    if layer.c_out != layer.c_in {
                        return Err(Error::ChannelMismatch {
                            expected: layer.c_in,
                            got: layer.c_out,
                        });
                    }
                    match kind {
                        PoolKind::GlobalAverage => pooled = true,
                        _ if layer.stride > 1 => depth += 1,
                        _ => {}
                    }
                    Bound::None
                }
                LayerKind::BatchNorm | LayerKind::Relu => {
                    if layer.c_out != layer.c_in {
                        return Err(Error::ChannelMismatch {
                            expected: layer.c_in,
                            got: layer.c_out,
                        });
                    }
                    if layer.kind == LayerKind::BatchNorm {
                        Bound::Norm(add_norm(&mut params, &mut stats, &layer.name, layer.c_in)?)
                    } else {
                        Bound::None
                    }
                }
                LayerKind::ResidualBlock => {
                    let n = &layer.name;
                    let (ci, co) = (layer.c_in, layer.c_out);
                    let conv1 = add_conv(&mut params, &format!("{n}.conv1"), &region, ci, co, false, rng)?;
                    let bn1 = add_norm(&mut params, &mut stats, &format!("{n}.bn1"), co)?;
                    let conv2 = add_conv(&mut params, &format!("{n}.conv2"), &region, co, co, false, rng)?;
                    let bn2 = add_norm(&mut params, &mut stats, &format!("{n}.bn2"), co)?;
                    let projection = if ci != co {
                        let id = KernelRegion::identity(dimension)?;
                        Some((
                            add_conv(&mut params, &format!("{n}.proj"), &id, ci, co, false, rng)?,
                            add_norm(&mut params, &mut stats, &format!("{n}.proj_bn"), co)?,
                        ))
                    } else {
                        None
                    };
                    Bound::Residual {
                        conv1,
                        bn1,
                        conv2,
                        bn2,
                        projection,
                    }
                }
                LayerKind::SkipConcat => {
                    if layer.c_out <= layer.c_in {
                        return Err(Error::InvalidArgument(format!(
                            "skip concat `{}` must widen {} channels",
                            layer.name, layer.c_in
                        )));
                    }
                    Bound::None
                }
            };
            regions.push(region);
            bound.push(b);
            width = layer.c_out;
        }
        Ok(Self {
            dimension,
            in_channels,
            out_channels: width,
            head,
            layers,
            regions,
            bound,
            params,
            stats,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Region actually used by layer `i`.
    pub fn region(&self, i: usize) -> &KernelRegion {
        &self.regions[i]
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn batch_norm_stats(&self) -> &[BatchNormStats] {
        &self.stats
    }

    /// Record a forward pass on `tape`. `input` holds the input features.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        coords: Arc<CoordinateMap>,
        input: ValueId,
        training: bool,
    ) -> Result<NetOutput> {
        if coords.dimension() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got: coords.dimension(),
            });
        }
        let (rows, cols) = tape.value(input)?.shape();
        if cols != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                got: cols,
            });
        }
        if rows != coords.len() {
            return Err(Error::ShapeMismatch {
                what: "input features vs coordinates".into(),
                expected: vec![coords.len()],
                got: vec![rows],
            });
        }
        let input_coords = coords.clone();
        let mut st = ForwardState {
            coords,
            value: input,
            saved: HashMap::new(),
            maps: HashMap::new(),
        };
        let d = self.dimension;
        for i in 0..self.layers.len() {
            let layer = &self.layers[i];
            let region = &self.regions[i];
            match (&layer.kind, &self.bound[i]) {
                (LayerKind::Conv, Bound::Conv(p)) => {
                    let out_coords = if layer.stride > 1 {
                        st.saved
                            .insert(st.coords.tensor_stride().to_vec(), (st.coords.clone(), st.value));
                        Arc::new(crate::coords::stride_coordinates(&st.coords, &vec![layer.stride; d])?)
                    } else {
                        st.coords.clone()
                    };
                    let m = st.map(&st.coords.clone(), &out_coords, region, false)?;
                    st.value = conv_with_bias(tape, &self.params, st.value, p, m)?;
                    st.coords = out_coords;
                }
                (LayerKind::TransposedConv, Bound::Conv(p)) => {
                    let fine_stride: Vec<u32> = st
                        .coords
                        .tensor_stride()
                        .iter()
                        .map(|s| s / layer.stride)
                        .collect();
                    let (fine, _) = st.saved.get(&fine_stride).cloned().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "no encoder coordinates at stride {fine_stride:?} for `{}`",
                            layer.name
                        ))
                    })?;
                    let m = st.map(&st.coords.clone(), &fine, region, true)?;
                    st.value = conv_with_bias(tape, &self.params, st.value, p, m)?;
                    st.coords = fine;
                }
                (LayerKind::Pool(kind), _) => match kind {
                    PoolKind::GlobalAverage => {
                        let batches: Vec<u32> = (0..st.coords.len()).map(|r| st.coords.batch(r)).collect();
                        let (m, present) = global_pool_map(&batches)?;
                        let keys: Vec<i32> = present
                            .iter()
                            .flat_map(|&b| std::iter::once(b as i32).chain(std::iter::repeat_n(0, d)))
                            .collect();
                        st.value = tape.avg_pool(st.value, Arc::new(m))?;
                        st.coords = Arc::new(CoordinateMap::from_keys(d, vec![1; d], keys)?);
                    }
                    PoolKind::Max | PoolKind::Average => {
                        let out_coords = if layer.stride > 1 {
                            st.saved
                                .insert(st.coords.tensor_stride().to_vec(), (st.coords.clone(), st.value));
                            Arc::new(crate::coords::stride_coordinates(&st.coords, &vec![layer.stride; d])?)
                        } else {
                            st.coords.clone()
                        };
                        let m = st.map(&st.coords.clone(), &out_coords, region, false)?;
                        st.value = if *kind == PoolKind::Max {
                            tape.max_pool(st.value, &m)?
                        } else {
                            tape.avg_pool(st.value, m)?
                        };
                        st.coords = out_coords;
                    }
                },
                (LayerKind::BatchNorm, Bound::Norm(n)) => {
                    st.value = norm(tape, &self.params, &mut self.stats, st.value, n, training)?;
                }
                (LayerKind::Relu, _) => st.value = tape.relu(st.value)?,
                (
                    LayerKind::ResidualBlock,
                    Bound::Residual {
                        conv1,
                        bn1,
                        conv2,
                        bn2,
                        projection,
                    },
                ) => {
                    let c = st.coords.clone();
                    let m = st.map(&c, &c, region, false)?;
                    let h = conv_with_bias(tape, &self.params, st.value, conv1, m.clone())?;
                    let h = norm(tape, &self.params, &mut self.stats, h, bn1, training)?;
                    let h = tape.relu(h)?;
                    let h = conv_with_bias(tape, &self.params, h, conv2, m)?;
                    let h = norm(tape, &self.params, &mut self.stats, h, bn2, training)?;
                    let shortcut = match projection {
                        Some((pc, pn)) => {
                            let id = KernelRegion::identity(d)?;
                            let pm = st.map(&c, &c, &id, false)?;
                            let s = conv_with_bias(tape, &self.params, st.value, pc, pm)?;
                            norm(tape, &self.params, &mut self.stats, s, pn, training)?
                        }
                        None => st.value,
                    };
                    let sum = tape.add(h, shortcut)?;
                    st.value = tape.relu(sum)?;
                }
                (LayerKind::SkipConcat, _) => {
                    let (enc_coords, enc_value) =
                        st.saved.get(st.coords.tensor_stride()).cloned().ok_or_else(|| {
                            Error::InvalidArgument(format!("no encoder features for `{}`", layer.name))
                        })?;
                    if !Arc::ptr_eq(&enc_coords, &st.coords) {
                        return Err(Error::InvalidArgument(format!(
                            "`{}`: decoder coordinates differ from the encoder's",
                            layer.name
                        )));
                    }
                    let cols = tape.value(enc_value)?.cols();
                    if layer.c_in + cols != layer.c_out {
                        return Err(Error::ChannelMismatch {
                            expected: layer.c_out - layer.c_in,
                            got: cols,
                        });
                    }
                    st.value = tape.concat(st.value, enc_value)?;
                }
                _ => unreachable!("layer bound to mismatched parameters"),
            }
        }

        if self.head == Head::Segmentation && !Arc::ptr_eq(&st.coords, &input_coords) {
            let rows = ancestor_rows(&input_coords, &st.coords)?;
            st.value = tape.gather(st.value, rows)?;
            st.coords = input_coords;
        }
        Ok(NetOutput {
            logits: st.value,
            coords: st.coords,
        })
    }

    /// Evaluation-mode logits for a standalone tensor.
    pub fn predict(&mut self, tensor: &SparseTensor<f64>) -> Result<(Arc<CoordinateMap>, crate::matrix::Matrix)> {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor.features().clone());
        let out = self.forward(&mut tape, tensor.coords().clone(), x, false)?;
        Ok((out.coords, tape.value(out.logits)?.clone()))
    }

    /// Layers, regions, strides and parameter counts.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<4} {:<24} {:<16} {:<22} {:>6} {:>11} {:>10}",
            "#", "name", "kind", "region", "stride", "channels", "params"
        );
        for (i, layer) in self.layers.iter().enumerate() {
            let r = &self.regions[i];
            let region = if layer.region.is_some() || layer.stride > 1 {
                format!("{:?} {:?} ({})", r.shape(), r.size(), r.volume()).to_lowercase()
            } else {
                "-".into()
            };
            let count: usize = self
                .params
                .iter()
                .filter(|p| p.name.starts_with(&format!("{}.", layer.name)))
                .map(|p| p.numel())
                .sum();
            let kind = match layer.kind {
                LayerKind::Conv => "conv".to_string(),
                LayerKind::TransposedConv => "transposed_conv".into(),
                LayerKind::Pool(k) => format!("pool/{k:?}").to_lowercase(),
                LayerKind::BatchNorm => "bn".into(),
                LayerKind::Relu => "relu".into(),
                LayerKind::ResidualBlock => "residual_block".into(),
                LayerKind::SkipConcat => "skip_concat".into(),
            };
            let _ = writeln!(
                s,
                "{:<4} {:<24} {:<16} {:<22} {:>6} {:>11} {:>10}",
                i,
                layer.name,
                kind,
                region,
                layer.stride,
                format!("{}->{}", layer.c_in, layer.c_out),
                count
            );
        }
        let _ = writeln!(s, "total parameters: {}", self.params.numel());
        s
    }

    /// Parameters followed by batch-norm running statistics.
    pub fn state_blobs(&self) -> Vec<NamedBlob> {
        let mut blobs = self.params.to_blobs();
        for (name, st) in self.norm_names().into_iter().zip(&self.stats) {
            blobs.push(NamedBlob {
                name: format!("{name}.running_mean"),
                dims: vec![st.channels()],
                data: st.running_mean.clone(),
            });
            blobs.push(NamedBlob {
                name: format!("{name}.running_var"),
                dims: vec![st.channels()],
                data: st.running_var.clone(),
            });
        }
        blobs
    }

    pub fn load_state_blobs(&mut self, blobs: &[NamedBlob]) -> Result<()> {
        self.params.load_blobs(blobs)?;
        for (name, st) in self.norm_names().into_iter().zip(self.stats.iter_mut()) {
            for (suffix, dst) in [("running_mean", &mut st.running_mean), ("running_var", &mut st.running_var)] {
                let full = format!("{name}.{suffix}");
                let b = blobs
                    .iter()
                    .find(|b| b.name == full)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks `{full}`")))?;
                if b.dims != [dst.len()] {
                    return Err(Error::ShapeMismatch {
                        what: format!("`{full}` (network vs checkpoint)"),
                        expected: vec![dst.len()],
                        got: b.dims.clone(),
                    });
                }
                dst.copy_from_slice(&b.data);
            }
        }
        Ok(())
    }

    fn norm_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter_map(|p| p.name.strip_suffix(".gamma").map(str::to_string))
            .collect()
    }
}

fn conv_with_bias(
    tape: &mut Tape,
    params: &ParamStore,
    x: ValueId,
    p: &ConvParams,
    m: Arc<KernelMap>,
) -> Result<ValueId> {
    let y = tape.conv(x, params, p.weight, m)?;
    match p.bias {
        Some(b) => tape.add_bias(y, params, b),
        None => Ok(y),
    }
}

fn norm(
    tape: &mut Tape,
    params: &ParamStore,
    stats: &mut [BatchNormStats],
    x: ValueId,
    n: &NormParams,
    training: bool,
) -> Result<ValueId> {
    tape.batch_norm(x, params, n.gamma, n.beta, &mut stats[n.stats], training)
}

/// Row in `coarse` containing each row of `fine`.
pub fn ancestor_rows(fine: &CoordinateMap, coarse: &CoordinateMap) -> Result<Vec<u32>> {
    let stride = coarse.tensor_stride();
    let mut probe = Vec::with_capacity(fine.dimension() + 1);
    (0..fine.len())
        .map(|r| {
            let key = fine.key(r);
            probe.clear();
            probe.push(key[0]);
            probe.extend(key[1..].iter().zip(stride).map(|(&v, &s)| v.div_euclid(s as i32) * s as i32));
            coarse.lookup_key(&probe).map(|i| i as u32).ok_or(Error::IndexOutOfRange {
                index: r,
                len: coarse.len(),
            })
        })
        .collect()
}

fn stem(cfg: &NetworkConfig) -> Result<Vec<LayerSpec>> {
    let w0 = cfg.width(0);
    Ok(vec![
        LayerSpec::conv("stem", cfg.stem_region()?, cfg.in_channels, w0),
        LayerSpec::batch_norm("stem_bn", w0),
        LayerSpec::relu(w0),
    ])
}

fn encoder(cfg: &NetworkConfig, layers: &mut Vec<LayerSpec>) -> Result<()> {
    for (s, &blocks) in cfg.blocks.iter().enumerate() {
        let w = cfg.width(s);
        if s > 0 {
            let prev = cfg.width(s - 1);
            layers.push(LayerSpec::strided_conv(format!("down{s}"), 2, prev, w));
            layers.push(LayerSpec::batch_norm(format!("down{s}_bn"), w));
            layers.push(LayerSpec::relu(w));
        }
        for b in 0..blocks {
            layers.push(LayerSpec::residual(format!("enc{s}.{b}"), cfg.stage_region(s)?, w, w));
        }
    }
    Ok(())
}

/// Residual network: stem, then stages of residual blocks separated by
/// stride-2 convolutions, then a pointwise head. Segmentation logits are
/// carried back to the input rows from their coarsest ancestor voxel.
pub fn build_minknet(cfg: &NetworkConfig, rng: &mut impl Rng) -> Result<Network> {
    cfg.validate()?;
    let mut layers = stem(cfg)?;
    encoder(cfg, &mut layers)?;
    let w = cfg.width(cfg.blocks.len() - 1);
    if cfg.head == Head::Classification {
        layers.push(LayerSpec::pool("global_pool", PoolKind::GlobalAverage, 1, w));
    }
    layers.push(LayerSpec::conv("head", KernelRegion::identity(cfg.dimension)?, w, cfg.classes).with_bias());
    Network::from_layers(cfg.dimension, cfg.in_channels, cfg.head, layers, rng)
}

/// U-shaped network: the residual encoder, then per stage a stride-2
/// transposed convolution back onto the encoder coordinates, concatenation
/// with the encoder features of that stride, and residual blocks.
pub fn build_minkunet(cfg: &NetworkConfig, rng: &mut impl Rng) -> Result<Network> {
    cfg.validate()?;
    if cfg.head != Head::Segmentation {
        return Err(Error::InvalidArgument("U-shaped networks produce segmentation logits".into()));
    }
    let mut layers = stem(cfg)?;
    encoder(cfg, &mut layers)?;
    for s in (0..cfg.blocks.len() - 1).rev() {
        let (w, deep) = (cfg.width(s), cfg.width(s + 1));
        layers.push(LayerSpec::transposed_conv(format!("up{s}"), 2, deep, w));
        layers.push(LayerSpec::batch_norm(format!("up{s}_bn"), w));
        layers.push(LayerSpec::relu(w));
        layers.push(LayerSpec::skip_concat(format!("skip{s}"), w, 2 * w));
        for b in 0..cfg.blocks[s].max(1) {
            let c_in = if b == 0 { 2 * w } else { w };
            layers.push(LayerSpec::residual(format!("dec{s}.{b}"), cfg.stage_region(s)?, c_in, w));
        }
    }
    let w0 = cfg.width(0);
    layers.push(LayerSpec::conv("head", KernelRegion::identity(cfg.dimension)?, w0, cfg.classes).with_bias());
    Network::from_layers(cfg.dimension, cfg.in_channels, cfg.head, layers, rng)
}
