//! Inference timing over voxel sizes, window lengths and model variants.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SynthConfig};
use crate::data::voxelize;
use crate::error::{CliError, Result};
use crate::model::Model;
use crate::scene::{generate, SceneSequence};

pub const MODES: [&str; 3] = ["3D", "4D", "4D-CRF"];

/// Median seconds to process a window of frames in each mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub voxel_size: f64,
    pub window: usize,
    #[serde(rename = "3D")]
    pub t3d: f64,
    #[serde(rename = "4D")]
    pub t4d: f64,
    #[serde(rename = "4D-CRF")]
    pub t4d_crf: f64,
}

impl BenchRow {
    pub fn time(&self, mode: usize) -> f64 {
        [self.t3d, self.t4d, self.t4d_crf][mode]
    }
}

pub fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Medians of each task's wall time. Tasks run back to back within a
/// repeat so they see the same machine state, starting from a different
/// task each repeat so none always inherits another's warm caches.
fn timed_interleaved<const N: usize>(repeats: usize, tasks: &mut [&mut dyn FnMut() -> Result<()>; N]) -> Result<[f64; N]> {
    for task in tasks.iter_mut() {
        task()?;
    }
    let mut times = vec![Vec::with_capacity(repeats); N];
    for r in 0..repeats {
        for k in 0..N {
            let i = (r + k) % N;
            let start = Instant::now();
            tasks[i]()?;
            times[i].push(start.elapsed().as_secs_f64());
        }
    }
    let mut out = [0.0; N];
    for (o, t) in out.iter_mut().zip(times) {
        *o = median(t);
    }
    Ok(out)
}

/// Scene used when no data directory is given: the configured generator
/// with enough frames for the longest window.
pub fn bench_scene(cfg: &RunConfig) -> SceneSequence {
    let frames = cfg.bench.windows.iter().copied().max().unwrap_or(1);
    let spec = SynthConfig {
        frames: frames.max(cfg.synth.frames),
        ..cfg.synth.clone()
    };
    generate(&spec, cfg.run.seed)
}

/// One row per (voxel size, window) in configuration order. Each timing
/// covers voxelization and the forward pass of every frame in the window.
pub fn run(cfg: &RunConfig, seq: &SceneSequence) -> Result<Vec<BenchRow>> {
    let longest = cfg.bench.windows.iter().copied().max().unwrap_or(0);
    if seq.frames.len() < longest {
        return Err(CliError::Data(format!(
            "benchmark needs {longest} frames, sequence has {}",
            seq.frames.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut plain = cfg.clone();
    plain.crf.enabled = false;
    plain.net.arch = cfg.bench.arch;
    let mut m3 = Model::build(&plain, 3, seq.classes, &mut rng)?;
    let mut m4 = Model::build(&plain, 4, seq.classes, &mut rng)?;
    let mut m4c = m4.clone();
    m4c.attach_crf(&cfg.crf, seq.classes)?;

    let repeats = cfg.bench.repeats;
    let mut rows = Vec::new();
    for &voxel in &cfg.bench.voxel_sizes {
        for &window in &cfg.bench.windows {
            let points = seq.window(0..window);
            let mut per_frame = || -> Result<()> {
                for f in &seq.frames[..window] {
                    m3.scores(&voxelize(f, voxel, false)?)?;
                }
                Ok(())
            };
            let mut spatio_temporal = || m4.scores(&voxelize(&points, voxel, true)?).map(drop);
            let mut with_crf = || m4c.scores(&voxelize(&points, voxel, true)?).map(drop);
            let [t3d, t4d, t4d_crf] =
                timed_interleaved(repeats, &mut [&mut per_frame, &mut spatio_temporal, &mut with_crf])?;
            rows.push(BenchRow {
                voxel_size: voxel,
                window,
                t3d,
                t4d,
                t4d_crf,
            });
        }
    }
    Ok(rows)
}

/// Violations of: time grows as voxels shrink (per mode and window), and
/// the CRF never makes a 4D pass faster.
pub fn monotonicity_violations(rows: &[BenchRow]) -> Vec<String> {
    let mut out = Vec::new();
    let mut windows: Vec<usize> = rows.iter().map(|r| r.window).collect();
    windows.sort_unstable();
    windows.dedup();
    for &w in &windows {
        let mut line: Vec<&BenchRow> = rows.iter().filter(|r| r.window == w).collect();
        line.sort_by(|a, b| b.voxel_size.total_cmp(&a.voxel_size));
        for (m, name) in MODES.iter().enumerate() {
            for pair in line.windows(2) {
                if pair[1].time(m) <= pair[0].time(m) {
                    out.push(format!(
                        "{name}, window {w}: voxel {} took {:.4}s, not more than voxel {} at {:.4}s",
                        pair[1].voxel_size,
                        pair[1].time(m),
                        pair[0].voxel_size,
                        pair[0].time(m)
                    ));
                }
            }
        }
    }
    for r in rows {
        if r.t4d_crf < r.t4d {
            out.push(format!(
                "voxel {}, window {}: 4D-CRF {:.4}s below 4D {:.4}s",
                r.voxel_size, r.window, r.t4d_crf, r.t4d
            ));
        }
    }
    out
}

pub fn write_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| CliError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Voxel sizes across, window lengths down, three modes per voxel size.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut voxels: Vec<f64> = Vec::new();
    let mut windows: Vec<usize> = Vec::new();
    for r in rows {
        if !voxels.contains(&r.voxel_size) {
            voxels.push(r.voxel_size);
        }
        if !windows.contains(&r.window) {
            windows.push(r.window);
        }
    }
    let mut s = format!("{:<8}", "voxel");
    for v in &voxels {
        s += &format!("| {:^26} ", format!("{v}"));
    }
    s += &format!("\n{:<8}", "window");
    for _ in &voxels {
        s += &format!("| {:>8}{:>8}{:>10} ", MODES[0], MODES[1], MODES[2]);
    }
    s.push('\n');
    for &w in &windows {
        s += &format!("{w:<8}");
        for &v in &voxels {
            match rows.iter().find(|r| r.window == w && r.voxel_size == v) {
                Some(r) => s += &format!("| {:>8.4}{:>8.4}{:>10.4} ", r.t3d, r.t4d, r.t4d_crf),
                None => s += &format!("| {:>26} ", "-"),
            }
        }
        s.push('\n');
    }
    s
}
