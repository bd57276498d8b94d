//! Training-time point-cloud transforms. `augment` applies the enabled ones
//! in a fixed order: scale, rotation about z, translation, elastic
//! distortion, position noise, chromatic shift and jitter. Labels and times
//! are never touched.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::AugmentConfig;
use crate::scene::Points;

pub fn scale(points: &mut Points, s: f64) {
    for p in &mut points.positions {
        *p = p.map(|v| v * s);
    }
}

/// Rotate about the vertical (z) axis.
pub fn rotate_about_gravity(points: &mut Points, angle: f64) {
    let (sin, cos) = angle.sin_cos();
    for p in &mut points.positions {
        let [x, y, z] = *p;
        *p = [cos * x - sin * y, sin * x + cos * y, z];
    }
}

pub fn translate(points: &mut Points, delta: [f64; 3]) {
    for p in &mut points.positions {
        for a in 0..3 {
            p[a] += delta[a];
        }
    }
}

/// Smooth random displacement field on a regular grid, sampled trilinearly.
#[derive(Debug, Clone)]
pub struct ElasticField {
    origin: [f64; 3],
    pitch: f64,
    dims: [usize; 3],
    /// Displacement per grid node, `x` fastest.
    values: Vec<[f64; 3]>,
}

const SMOOTHING_RADIUS: i64 = 3;

impl ElasticField {
    /// Unit Gaussian noise per node, blurred with a Gaussian of one-node
    /// width along each axis and scaled by `magnitude`.
    pub fn random(lo: [f64; 3], hi: [f64; 3], pitch: f64, magnitude: f64, rng: &mut impl Rng) -> Self {
        let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / pitch).ceil().max(0.0) as usize + 2);
        let origin = [0, 1, 2].map(|a| lo[a] - 0.5 * pitch);
        let n = dims[0] * dims[1] * dims[2];
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut values: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| normal.sample(rng))).collect();
        let taps: Vec<f64> = (-SMOOTHING_RADIUS..=SMOOTHING_RADIUS)
            .map(|i| (-0.5 * (i * i) as f64).exp())
            .collect();
        let norm: f64 = taps.iter().sum();
        let stride = [1, dims[0], dims[0] * dims[1]];
        for axis in 0..3 {
            let src = values.clone();
            for (idx, out) in values.iter_mut().enumerate() {
                let pos = (idx / stride[axis]) % dims[axis];
                let mut acc = [0.0; 3];
                for (t, &w) in taps.iter().enumerate() {
                    let j = pos as i64 + t as i64 - SMOOTHING_RADIUS;
                    let j = j.clamp(0, dims[axis] as i64 - 1) as usize;
                    let v = src[idx - pos * stride[axis] + j * stride[axis]];
                    for c in 0..3 {
                        acc[c] += w * v[c];
                    }
                }
                *out = acc.map(|v| magnitude * v / norm);
            }
        }
        Self {
            origin,
            pitch,
            dims,
            values,
        }
    }

    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let g = ((p[a] - self.origin[a]) / self.pitch).clamp(0.0, (self.dims[a] - 1) as f64);
            let i = (g.floor() as usize).min(self.dims[a].saturating_sub(2));
            base[a] = i;
            frac[a] = g - i as f64;
        }
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = 0;
            let mut stride = 1;
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                idx += (base[a] + bit).min(self.dims[a] - 1) * stride;
                stride *= self.dims[a];
            }
            for c in 0..3 {
                out[c] += w * self.values[idx][c];
            }
        }
        out
    }
}

fn bounds(points: &Points) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &points.positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

pub fn elastic_distort(points: &mut Points, pitch: f64, magnitude: f64, rng: &mut impl Rng) {
    if points.is_empty() {
        return;
    }
    let (lo, hi) = bounds(points);
    let field = ElasticField::random(lo, hi, pitch, magnitude, rng);
    for p in &mut points.positions {
        let d = field.sample(*p);
        for a in 0..3 {
            p[a] += d[a];
        }
    }
}

pub fn position_noise(points: &mut Points, sigma: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for p in &mut points.positions {
        for v in p.iter_mut() {
            *v += normal.sample(rng);
        }
    }
}

/// Add `shift` to every point and per-point Gaussian `jitter`, clamped to 0..=255.
pub fn chromatic(points: &mut Points, shift: [f64; 3], jitter: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, jitter).expect("finite sigma");
    for c in &mut points.colors {
        for a in 0..3 {
            let noise = if jitter > 0.0 { normal.sample(rng) } else { 0.0 };
            c[a] = (c[a] + shift[a] + noise).clamp(0.0, 255.0);
        }
    }
}

pub fn augment(points: &mut Points, cfg: &AugmentConfig, rng: &mut impl Rng) {
    if !cfg.enabled {
        return;
    }
    if cfg.scale > 0.0 {
        scale(points, rng.random_range(1.0 - cfg.scale..=1.0 + cfg.scale));
    }
    if cfg.rotate > 0.0 {
        rotate_about_gravity(points, rng.random_range(-cfg.rotate..=cfg.rotate));
    }
    if cfg.translate > 0.0 {
        let t = cfg.translate;
        translate(points, [0; 3].map(|_| rng.random_range(-t..=t)));
    }
    if cfg.elastic_magnitude > 0.0 {
        elastic_distort(points, cfg.elastic_pitch, cfg.elastic_magnitude, rng);
    }
    if cfg.noise_sigma > 0.0 {
        position_noise(points, cfg.noise_sigma, rng);
    }
    if cfg.chroma_shift > 0.0 || cfg.chroma_jitter > 0.0 {
        let s = cfg.chroma_shift;
        let shift = if s > 0.0 {
            [0; 3].map(|_| rng.random_range(-s..=s))
        } else {
            [0.0; 3]
        };
        chromatic(points, shift, cfg.chroma_jitter, rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Points::default();
        for i in 0..n {
            p.positions.push([0; 3].map(|_| rng.random_range(-3.0..3.0)));
            p.colors.push([0; 3].map(|_| rng.random_range(0.0..255.0)));
            p.labels.push(i as i32 % 3);
            p.times.push(i as i32 % 2);
        }
        p
    }

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let orig = cloud(50, 1);
        let mut p = orig.clone();
        let cfg = AugmentConfig {
            enabled: true,
            ..AugmentConfig::none()
        };
        augment(&mut p, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(p, orig);
    }

    #[test]
    fn full_turn_is_identity() {
        let orig = cloud(50, 3);
        let mut p = orig.clone();
        rotate_about_gravity(&mut p, std::f64::consts::TAU);
        for (a, b) in p.positions.iter().zip(&orig.positions) {
            assert!(dist(*a, *b) <= 1e-9);
        }
    }

    #[test]
    fn scaling_scales_pairwise_distances() {
        let orig = cloud(30, 4);
        let mut p = orig.clone();
        scale(&mut p, 1.75);
        for i in 0..30 {
            for j in 0..30 {
                let want = 1.75 * dist(orig.positions[i], orig.positions[j]);
                assert!((dist(p.positions[i], p.positions[j]) - want).abs() <= 1e-12 * want.max(1.0));
            }
        }
    }

    #[test]
    fn rotation_keeps_height_and_distances() {
        let orig = cloud(20, 5);
        let mut p = orig.clone();
        rotate_about_gravity(&mut p, 0.7);
        for i in 0..20 {
            assert_eq!(p.positions[i][2], orig.positions[i][2]);
            for j in 0..20 {
                let d0 = dist(orig.positions[i], orig.positions[j]);
                assert!((dist(p.positions[i], p.positions[j]) - d0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn elastic_field_is_smooth_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = ElasticField::random([0.0; 3], [4.0; 3], 1.0, 0.2, &mut rng);
        let a = f.sample([1.0, 1.0, 1.0]);
        let b = f.sample([1.01, 1.0, 1.0]);
        assert!(dist(a, b) < 0.01);
        assert!(a.iter().all(|v| v.abs() < 1.0));
        assert_eq!(f.sample([-50.0; 3]), f.sample([-60.0; 3]));
    }

    #[test]
    fn full_pipeline_leaves_labels_and_times() {
        let orig = cloud(40, 7);
        let mut p = orig.clone();
        let cfg = AugmentConfig {
            noise_sigma: 0.05,
            ..AugmentConfig::default()
        };
        augment(&mut p, &cfg, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(p.labels, orig.labels);
        assert_eq!(p.times, orig.times);
        assert_ne!(p.positions, orig.positions);
        assert!(p.colors.iter().flatten().all(|&c| (0.0..=255.0).contains(&c)));
    }
}
