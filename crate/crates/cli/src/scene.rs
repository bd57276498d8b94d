//! Labeled point-cloud videos: a static ground plane plus moving boxes.

use std::path::Path;

use mink_core::io::{read_points, write_points, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.toml";

/// Points with color, label and frame time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Points {
    pub positions: Vec<[f64; 3]>,
    /// RGB in `0..=255`.
    pub colors: Vec<[f64; 3]>,
    pub labels: Vec<i32>,
    pub times: Vec<i32>,
}

impl Points {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn push(&mut self, p: [f64; 3], c: [f64; 3], label: i32, time: i32) {
        self.positions.push(p);
        self.colors.push(c);
        self.labels.push(label);
        self.times.push(time);
    }

    pub fn extend(&mut self, other: &Points) {
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
        self.labels.extend_from_slice(&other.labels);
        self.times.extend_from_slice(&other.times);
    }

    /// Mean position of the points carrying `label`.
    pub fn centroid(&self, label: i32) -> Option<[f64; 3]> {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for (p, &l) in self.positions.iter().zip(&self.labels) {
            if l == label {
                for a in 0..3 {
                    sum[a] += p[a];
                }
                n += 1;
            }
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }

    fn to_cloud(&self) -> Result<PointCloud> {
        let positions = self.positions.iter().flatten().map(|&v| v as f32).collect();
        let features = self.colors.iter().flatten().map(|&v| v as f32).collect();
        Ok(PointCloud::new(3, 3, positions, features, Some(self.labels.clone()))?)
    }

    fn from_cloud(cloud: &PointCloud, time: i32) -> Result<Self> {
        if cloud.dimension != 3 || cloud.n_features != 3 {
            return Err(CliError::Data(format!(
                "expected 3D points with 3 color channels, got D={} and {} features",
                cloud.dimension, cloud.n_features
            )));
        }
        let labels = cloud
            .labels
            .clone()
            .ok_or_else(|| CliError::Data("frame has no labels".into()))?;
        let n = cloud.len();
        let triple = |v: &[f32]| [v[0] as f64, v[1] as f64, v[2] as f64];
        Ok(Self {
            positions: (0..n).map(|i| triple(cloud.position(i))).collect(),
            colors: (0..n).map(|i| triple(cloud.feature(i))).collect(),
            labels,
            times: vec![time; n],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub classes: usize,
    /// One entry per frame; frame `t` has every time set to `t`.
    pub frames: Vec<Points>,
}

impl SceneSequence {
    /// Concatenation of frames `range`.
    pub fn window(&self, range: std::ops::Range<usize>) -> Points {
        let mut out = Points::default();
        for f in &self.frames[range] {
            out.extend(f);
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    classes: usize,
    seed: u64,
    frames: Vec<ManifestFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFrame {
    time: i32,
    file: String,
}

/// Mean color of each class; ground first.
const PALETTE: [[f64; 3]; 6] = [
    [120.0, 110.0, 95.0],
    [200.0, 50.0, 45.0],
    [50.0, 80.0, 200.0],
    [60.0, 170.0, 70.0],
    [220.0, 200.0, 60.0],
    [150.0, 70.0, 180.0],
];

fn class_color(class: usize) -> [f64; 3] {
    let base = PALETTE[class % PALETTE.len()];
    let shade = (class / PALETTE.len()) as f64 * 30.0;
    base.map(|v| (v - shade).max(0.0))
}

#[derive(Debug, Clone)]
struct BoxObject {
    class: i32,
    center: [f64; 2],
    half: [f64; 3],
    velocity: [f64; 2],
}

/// Values as stored on disk, so a generated sequence equals its reload.
fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Deterministic scene for `seed`; frame `t` draws its samples from stream `t`.
pub fn generate(spec: &SynthConfig, seed: u64) -> SceneSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let object_classes = (spec.classes - 1) as i32;
    let objects: Vec<BoxObject> = (0..spec.objects)
        .map(|i| {
            let half = [0; 3].map(|_| 0.5 * spec.object_size * rng.random_range(0.6..1.4));
            let reach = (spec.extent - half[0].max(half[1])).max(0.0) * 0.7;
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            BoxObject {
                class: 1 + (i as i32 % object_classes),
                center: [rng.random_range(-reach..=reach), rng.random_range(-reach..=reach)],
                half,
                velocity: [spec.speed * angle.cos(), spec.speed * angle.sin()],
            }
        })
        .collect();

    let color_noise = Normal::new(0.0, spec.color_noise).expect("finite sigma");
    let pos_noise = Normal::new(0.0, spec.position_noise).expect("finite sigma");
    let flicker = Normal::new(0.0, spec.color_flicker).expect("finite sigma");
    let frames = (0..spec.frames)
        .map(|t| {
            let mut frng = ChaCha8Rng::seed_from_u64(seed);
            frng.set_stream(t as u64 + 1);
            let mut pts = Points::default();
            let shifts: Vec<[f64; 3]> = if spec.color_flicker > 0.0 {
                (0..=objects.len()).map(|_| [0; 3].map(|_| flicker.sample(&mut frng))).collect()
            } else {
                vec![[0.0; 3]; objects.len() + 1]
            };
            let color = |class: usize, shift: [f64; 3], r: &mut ChaCha8Rng| {
                let base = class_color(class);
                [0, 1, 2].map(|c| f32_round((base[c] + shift[c] + color_noise.sample(r)).clamp(0.0, 255.0)))
            };
            let cells = (2.0 * spec.extent / spec.ground_spacing).floor() as usize;
            for i in 0..cells {
                for j in 0..cells {
                    let x = -spec.extent + (i as f64 + frng.random_range(0.0..1.0)) * spec.ground_spacing;
                    let y = -spec.extent + (j as f64 + frng.random_range(0.0..1.0)) * spec.ground_spacing;
                    let z = frng.random_range(-0.02..0.02);
                    let c = color(0, shifts[0], &mut frng);
                    pts.push([x, y, z], c, 0, t as i32);
                }
            }
            for (k, obj) in objects.iter().enumerate() {
                let cx = obj.center[0] + obj.velocity[0] * t as f64;
                let cy = obj.center[1] + obj.velocity[1] * t as f64;
                let [hx, hy, hz] = obj.half;
                // Four sides and the top, sampled by area.
                let areas = [hy * hz, hy * hz, hx * hz, hx * hz, hx * hy];
                let total: f64 = areas.iter().sum();
                for _ in 0..spec.points_per_object {
                    let mut pick = frng.random_range(0.0..total);
                    let mut face = 0;
                    while face < 4 && pick >= areas[face] {
                        pick -= areas[face];
                        face += 1;
                    }
                    let u = frng.random_range(-1.0..1.0);
                    let v = frng.random_range(-1.0..1.0);
                    let local = match face {
                        0 => [-hx, u * hy, (v + 1.0) * hz],
                        1 => [hx, u * hy, (v + 1.0) * hz],
                        2 => [u * hx, -hy, (v + 1.0) * hz],
                        3 => [u * hx, hy, (v + 1.0) * hz],
                        _ => [u * hx, v * hy, 2.0 * hz],
                    };
                    let c = color(obj.class as usize, shifts[k + 1], &mut frng);
                    pts.push([cx + local[0], cy + local[1], local[2]], c, obj.class, t as i32);
                }
            }
            if spec.position_noise > 0.0 {
                for p in &mut pts.positions {
                    for v in p.iter_mut() {
                        *v += pos_noise.sample(&mut frng);
                    }
                }
            }
            for p in &mut pts.positions {
                *p = p.map(f32_round);
            }
            pts
        })
        .collect();
    SceneSequence {
        classes: spec.classes,
        frames,
    }
}

fn frame_file(t: usize) -> String {
    format!("frame_{t:04}.spg1")
}

/// One SPG1 file per frame plus `manifest.toml`.
pub fn write_sequence(dir: &Path, seq: &SceneSequence, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (t, f) in seq.frames.iter().enumerate() {
        let name = frame_file(t);
        let path = dir.join(&name);
        write_points(&path, &f.to_cloud()?).map_err(|e| CliError::data(path.display(), e))?;
        frames.push(ManifestFrame {
            time: t as i32,
            file: name,
        });
    }
    let manifest = Manifest {
        classes: seq.classes,
        seed,
        frames,
    };
    let path = dir.join(MANIFEST);
    let text = toml::to_string(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn read_sequence(dir: &Path) -> Result<SceneSequence> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if manifest.classes < 2 {
        return Err(CliError::Data(format!("{}: fewer than 2 classes", path.display())));
    }
    if manifest.frames.windows(2).any(|w| w[0].time >= w[1].time) {
        return Err(CliError::Data(format!("{}: frame times must increase", path.display())));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (t, mf) in manifest.frames.iter().enumerate() {
        let p = dir.join(&mf.file);
        let cloud = read_points(&p).map_err(|e| CliError::data(p.display(), e))?;
        let pts = Points::from_cloud(&cloud, t as i32)?;
        if let Some(&bad) = pts.labels.iter().find(|&&l| l >= manifest.classes as i32 || l < -1) {
            return Err(CliError::Data(format!("{}: label {bad} outside 0..{}", p.display(), manifest.classes)));
        }
        frames.push(pts);
    }
    Ok(SceneSequence {
        classes: manifest.classes,
        frames,
    })
}
