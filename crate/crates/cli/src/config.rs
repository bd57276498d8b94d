//! Run configuration: a sectioned TOML file, every key optional, plus
//! `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use mink_core::net::{KernelPolicy, NetworkConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataConfig,
    pub net: NetConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub crf: CrfConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One 3D tensor per frame.
    #[serde(rename = "3d")]
    PerFrame,
    /// One 4D tensor per sliding window of frames.
    #[serde(rename = "4d")]
    Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub voxel_size: f64,
    pub mode: Mode,
    /// Frames per 4D window.
    pub window: usize,
    /// Step between consecutive training windows.
    pub window_stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Residual encoder with a per-voxel head.
    Resnet,
    /// Encoder, transposed-conv decoder and skip concatenation.
    Unet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub arch: Arch,
    pub base_width: usize,
    pub blocks: Vec<usize>,
    /// Per-stage kernel shape. Empty selects hypercube in 3D and hybrid in 4D.
    pub kernel_policy: Vec<String>,
    pub kernel_size: u32,
    pub stem_size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Scale factor drawn from `[1 − scale, 1 + scale]`.
    pub scale: f64,
    /// Rotation about the vertical axis drawn from `[−rotate, rotate]` radians.
    pub rotate: f64,
    /// Per-axis shift drawn from `[−translate, translate]`.
    pub translate: f64,
    pub elastic_magnitude: f64,
    pub elastic_pitch: f64,
    /// Standard deviation of per-point position noise.
    pub noise_sigma: f64,
    /// Per-channel color offset drawn from `[−chroma_shift, chroma_shift]`.
    pub chroma_shift: f64,
    /// Standard deviation of per-point color noise.
    pub chroma_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfConfig {
    pub enabled: bool,
    pub iterations: usize,
    /// Voxels per CRF spatial cell.
    pub space_step: f64,
    /// Color units per CRF chroma cell.
    pub chroma_step: f64,
    /// Frames per CRF time cell.
    pub time_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub objects: usize,
    /// Ground is class 0, objects cycle through the rest.
    pub classes: usize,
    /// Ground covers `[−extent, extent]²`.
    pub extent: f64,
    pub ground_spacing: f64,
    pub points_per_object: usize,
    /// Mean edge length of an object box.
    pub object_size: f64,
    /// Distance an object travels per frame.
    pub speed: f64,
    pub color_noise: f64,
    /// Standard deviation of an RGB offset drawn per frame for the ground
    /// and for each object, shared by all of that surface's points.
    pub color_flicker: f64,
    /// Gaussian noise baked into stored positions.
    pub position_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// For per-frame models, also report logits averaged over the window.
    pub temporal_average: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Network timed in every mode; the other `net` keys still apply.
    pub arch: Arch,
    pub voxel_sizes: Vec<f64>,
    pub windows: Vec<usize>,
    pub repeats: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            voxel_size: 0.25,
            mode: Mode::PerFrame,
            window: 3,
            window_stride: 1,
        }
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Unet,
            base_width: 8,
            blocks: vec![1, 1, 1],
            kernel_policy: Vec::new(),
            kernel_size: 3,
            stem_size: 5,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            poly_power: 0.9,
            iterations: 300,
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale: 0.1,
            rotate: std::f64::consts::PI,
            translate: 0.2,
            elastic_magnitude: 0.05,
            elastic_pitch: 1.0,
            noise_sigma: 0.0,
            chroma_shift: 10.0,
            chroma_jitter: 3.0,
        }
    }
}

impl AugmentConfig {
    /// All transforms off.
    pub fn none() -> Self {
        Self {
            enabled: false,
            scale: 0.0,
            rotate: 0.0,
            translate: 0.0,
            elastic_magnitude: 0.0,
            elastic_pitch: 1.0,
            noise_sigma: 0.0,
            chroma_shift: 0.0,
            chroma_jitter: 0.0,
        }
    }
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            iterations: 3,
            space_step: 1.0,
            chroma_step: 25.0,
            time_step: 1.0,
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            objects: 3,
            classes: 3,
            extent: 6.0,
            ground_spacing: 0.2,
            points_per_object: 600,
            object_size: 1.2,
            speed: 0.4,
            color_noise: 12.0,
            color_flicker: 0.0,
            position_noise: 0.0,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { temporal_average: true }
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Resnet,
            voxel_sizes: vec![0.6, 0.45, 0.3],
            windows: vec![3, 5, 7],
            repeats: 9,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            data: DataConfig::default(),
            net: NetConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            crf: CrfConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Split `section.key=value` and parse the value as a TOML literal, falling
/// back to a bare string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value)> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<String> = path.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.iter().any(String::is_empty) {
        return Err(config_err(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parse TOML text and apply overrides on top of the defaults.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let file: Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        let mut table = Table::new();
        merge(&mut table, file);
        for spec in overrides {
            let (path, value) = parse_override(spec)?;
            set_path(&mut table, &path, value)?;
        }
        let cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.voxel_size", self.data.voxel_size),
            ("optim.lr", self.optim.lr),
            ("augment.elastic_pitch", self.augment.elastic_pitch),
            ("crf.space_step", self.crf.space_step),
            ("crf.chroma_step", self.crf.chroma_step),
            ("crf.time_step", self.crf.time_step),
            ("synth.extent", self.synth.extent),
            ("synth.ground_spacing", self.synth.ground_spacing),
            ("synth.object_size", self.synth.object_size),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("{key} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("optim.momentum", self.optim.momentum),
            ("optim.poly_power", self.optim.poly_power),
            ("augment.scale", self.augment.scale),
            ("augment.rotate", self.augment.rotate),
            ("augment.translate", self.augment.translate),
            ("augment.elastic_magnitude", self.augment.elastic_magnitude),
            ("augment.noise_sigma", self.augment.noise_sigma),
            ("augment.chroma_shift", self.augment.chroma_shift),
            ("augment.chroma_jitter", self.augment.chroma_jitter),
            ("synth.speed", self.synth.speed),
            ("synth.color_noise", self.synth.color_noise),
            ("synth.color_flicker", self.synth.color_flicker),
            ("synth.position_noise", self.synth.position_noise),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(format!("{key} must be non-negative, got {v}")));
            }
        }
        if self.augment.scale >= 1.0 {
            return Err(config_err("augment.scale must be below 1"));
        }
        let counts = [
            ("data.window", self.data.window),
            ("data.window_stride", self.data.window_stride),
            ("net.base_width", self.net.base_width),
            ("net.blocks", self.net.blocks.len()),
            ("synth.frames", self.synth.frames),
            ("bench.voxel_sizes", self.bench.voxel_sizes.len()),
            ("bench.windows", self.bench.windows.len()),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(config_err(format!("{key} must be positive")));
            }
        }
        if self.synth.classes < 2 {
            return Err(config_err("synth.classes must be at least 2"));
        }
        if self.bench.repeats < 5 {
            return Err(config_err("bench.repeats must be at least 5"));
        }
        if self.bench.voxel_sizes.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(config_err("bench.voxel_sizes must be positive"));
        }
        if self.bench.windows.contains(&0) {
            return Err(config_err("bench.windows must be positive"));
        }
        if self.net.kernel_size == 0 || self.net.stem_size == 0 {
            return Err(config_err("net.kernel_size and net.stem_size must be positive"));
        }
        self.kernel_policy(self.dimension())?;
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        match self.data.mode {
            Mode::PerFrame => 3,
            Mode::Window => 4,
        }
    }

    fn kernel_policy(&self, dimension: usize) -> Result<Vec<KernelPolicy>> {
        if self.net.kernel_policy.is_empty() {
            return Ok(vec![if dimension == 4 {
                KernelPolicy::Hybrid
            } else {
                KernelPolicy::Hypercube
            }]);
        }
        self.net
            .kernel_policy
            .iter()
            .map(|s| s.parse().map_err(|e: mink_core::Error| config_err(format!("net.kernel_policy: {e}"))))
            .collect()
    }

    /// Network settings for the given input dimension.
    pub fn network(&self, dimension: usize, in_channels: usize, classes: usize) -> Result<NetworkConfig> {
        let cfg = NetworkConfig {
            base_width: self.net.base_width,
            blocks: self.net.blocks.clone(),
            kernel_policy: self.kernel_policy(dimension)?,
            kernel_size: self.net.kernel_size,
            stem_size: self.net.stem_size,
            ..NetworkConfig::new(dimension, in_channels, classes)
        };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }
}
