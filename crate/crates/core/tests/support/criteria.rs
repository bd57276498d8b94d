//! Measurements behind the acceptance thresholds. Each returns the observed
//! quantity so callers can assert or report it.

use std::collections::BTreeSet;
use std::sync::Arc;

use mink_core::autograd::ParamStore;
use mink_core::coords::{quantize_batched, stride_coordinates, QuantizeOptions, IGNORE_LABEL};
use mink_core::crf::{ts_crf_infer, ts_crf_on_tape, CompatibilityKernel};
use mink_core::kernel::{build_kernel_map, build_transposed_kernel_map, enumerate_offsets};
use mink_core::sparse_ops::{global_pool_map, softmax_rows, sparse_conv_forward, BatchNormStats, Pointwise};
use mink_core::{ConvWeights, CoordinateMap, KernelRegion, KernelShape, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub const GRADIENT_INSTANCES: u64 = 20;
pub const GRADIENT_TOL: f64 = 1e-4;

fn dense_grid(dims: &[usize]) -> CoordinateMap {
    let mut keys = Vec::new();
    for_each_index(dims, |idx| {
        keys.push(0);
        keys.extend(idx.iter().map(|&v| v as i32));
    });
    CoordinateMap::from_keys(dims.len(), vec![1; dims.len()], keys).unwrap()
}

/// Worst elementwise gap between sparse and dense convolution on one grid.
pub fn dense_case(dims: &[usize], k: u32, stride: u32, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ci, co) = (2, 3);
    let d = dims.len();
    let c_in = dense_grid(dims);
    let x: Vec<Vec<f64>> = (0..c_in.len())
        .map(|_| (0..ci).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let features = Matrix::from_fn(c_in.len(), ci, |r, c| x[r][c]);
    let c_out = stride_coordinates(&c_in, &vec![stride; d]).unwrap();
    let region = KernelRegion::hypercube(d, k).unwrap();
    let w = ConvWeights::from_fn(region.volume(), co, ci, |kk, o, i| offset_weight(seed, region.offset(kk), o, i));
    let m = build_kernel_map(&c_in, &c_out, &region).unwrap();
    let sparse = sparse_conv_forward(&features, &w, &m, c_out.len()).unwrap();

    let oracle = dense_conv(dims, &x, co, k as usize, stride as usize, |o, a, b| offset_weight(seed, o, a, b));
    if oracle.len() != c_out.len() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (u, vals) in oracle {
        let mut key = vec![0];
        key.extend(u.iter().map(|&v| v as i32));
        let Some(row) = c_out.lookup_key(&key) else {
            return f64::INFINITY;
        };
        for (a, b) in sparse.row(row).iter().zip(&vals) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Worst gap over 2D, 3D and 8×8×8 grids, kernel sizes 3 and 5, strides 1 and 2.
pub fn dense_equivalence() -> f64 {
    let mut seed = 0;
    let mut worst: f64 = 0.0;
    for dims in [vec![6, 6], vec![4, 5, 3], vec![8, 8, 8]] {
        for k in [3, 5] {
            for stride in [1, 2] {
                seed += 1;
                worst = worst.max(dense_case(&dims, k, stride, seed));
            }
        }
    }
    worst
}

/// Number of instances (out of 100) where stride 1 changes the coordinate set
/// or a strided output differs from the floor-div set.
pub fn special_case_failures() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for _ in 0..100 {
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..60);
        let c = random_coords(&mut rng, d, n, 9, 3);
        let same = stride_coordinates(&c, &vec![1; d]).unwrap();
        let a: BTreeSet<&[i32]> = (0..c.len()).map(|r| c.key(r)).collect();
        let b: BTreeSet<&[i32]> = (0..same.len()).map(|r| same.key(r)).collect();

        let s: Vec<u32> = (0..d).map(|_| rng.random_range(1..4)).collect();
        let strided = stride_coordinates(&c, &s).unwrap();
        let oracle: BTreeSet<Vec<i32>> = (0..c.len())
            .map(|r| {
                let key = c.key(r);
                let mut o = vec![key[0]];
                for (axis, &v) in key[1..].iter().enumerate() {
                    let si = s[axis] as i32;
                    o.push((v as f64 / si as f64).floor() as i32 * si);
                }
                o
            })
            .collect();
        let got: BTreeSet<Vec<i32>> = (0..strided.len()).map(|r| strided.key(r).to_vec()).collect();
        if a != b || got != oracle {
            failures += 1;
        }
    }
    failures
}

/// `(description, observed, expected)` offset counts.
pub fn kernel_cardinalities() -> Vec<(String, usize, usize)> {
    let mut out = vec![(
        "hypercube K=5 D=4".to_string(),
        KernelRegion::hypercube(4, 5).unwrap().volume(),
        625,
    )];
    for (d, n) in [(2, 5), (3, 7), (4, 9)] {
        out.push((format!("hypercross K=3 D={d}"), KernelRegion::hypercross(d, 3).unwrap().volume(), n));
    }
    out.push(("hybrid 3x3x3 + 3".into(), KernelRegion::hybrid(&[3, 3, 3], 3).unwrap().volume(), 29));
    out.push((
        "hybrid via enumerate_offsets".into(),
        enumerate_offsets(KernelShape::Hybrid, &[3, 3, 3, 3], 4, &[1; 4]).unwrap().volume(),
        29,
    ));
    out
}

/// Voxels whose label differs from the brute-force rule, over 1000 instances.
pub fn quantization_mismatches() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..40);
        let voxel = rng.random_range(0.2..2.0);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let batches: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let labels: Vec<i32> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let pm = Matrix::from_fn(n, d, |r, c| points[r][c]);
        let q = quantize_batched(&pm, &Matrix::zeros(n, 1), Some(&labels), Some(&batches), QuantizeOptions::new(voxel))
            .unwrap();
        let oracle = brute_force_labels(&points, &batches, &labels, voxel);
        let got_labels = q.labels.unwrap();
        let coords = q.tensor.coords();
        if coords.len() != oracle.len() {
            mismatches += coords.len().abs_diff(oracle.len()).max(1);
            continue;
        }
        for r in 0..coords.len() {
            let key = (coords.batch(r), coords.spatial(r).iter().map(|&v| v as i64).collect());
            if oracle.get(&key) != Some(&got_labels[r]) {
                mismatches += 1;
            }
        }
    }
    mismatches
}

pub fn crf_instance(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (CoordinateMap, Matrix, CompatibilityKernel) {
    let coords = random_coords(rng, 7, n, 1, 2);
    let u = random_matrix(rng, n, c).scale(2.0);
    let mut k = CompatibilityKernel::new(c).unwrap();
    for v in k.weights_mut().as_mut_slice() {
        *v = rng.random_range(-1.5..1.5);
    }
    (coords, u, k)
}

/// Worst gap between the sparse recurrence and node-by-node updates for
/// 1 to 10 nodes and 1 to 3 iterations.
pub fn crf_direct_gap() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        let n = rng.random_range(1..=10);
        let c = rng.random_range(2..=4);
        let (coords, u, k) = crf_instance(&mut rng, n, c);
        let nodes: Vec<Vec<i32>> = (0..n).map(|r| coords.key(r).to_vec()).collect();
        let unary: Vec<Vec<f64>> = (0..n).map(|r| u.row(r).to_vec()).collect();
        let pairwise: Vec<(Vec<i32>, Vec<Vec<f64>>)> = (0..k.region().volume())
            .map(|kk| {
                let m = k.weights().matrix(kk);
                (k.region().offset(kk).to_vec(), (0..c).map(|a| m[a * c..(a + 1) * c].to_vec()).collect())
            })
            .collect();
        for iters in 1..=3 {
            let q = ts_crf_infer(&u, &coords, &k, iters).unwrap();
            let direct = crf_direct(&nodes, &unary, &pairwise, iters);
            for (r, row) in direct.iter().enumerate() {
                for (a, v) in row.iter().enumerate() {
                    worst = worst.max((q.get(r, a) - v).abs());
                }
            }
        }
    }
    worst
}

/// Whether zero compatibility weights give exactly the softmax of the unary.
pub fn crf_zero_pairwise_is_softmax() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let coords = random_coords(&mut rng, 7, 10, 1, 1);
    let u = random_matrix(&mut rng, 10, 3);
    let k = CompatibilityKernel::new(3).unwrap();
    (0..4).all(|iters| ts_crf_infer(&u, &coords, &k, iters).unwrap() == softmax_rows(&u))
}

/// Worst `|⟨conv x, y⟩ − ⟨x, convᵀ y⟩|` over 50 instances.
pub fn adjointness_gap() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..60);
        let fine = random_coords(&mut rng, d, n, 5, 2);
        let coarse = stride_coordinates(&fine, &vec![2; d]).unwrap();
        let region = if rng.random_bool(0.5) {
            KernelRegion::stride_window(d, 2).unwrap()
        } else {
            KernelRegion::hypercube(d, 3).unwrap()
        };
        let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
        let w = ConvWeights::from_fn(region.volume(), co, ci, |_, _, _| rng.random_range(-1.0..1.0));
        let x = random_matrix(&mut rng, fine.len(), ci);
        let y = random_matrix(&mut rng, coarse.len(), co);
        let fwd = build_kernel_map(&fine, &coarse, &region).unwrap();
        let conv_x = sparse_conv_forward(&x, &w, &fwd, coarse.len()).unwrap();
        let back = build_transposed_kernel_map(&coarse, &fine, &region).unwrap();
        let conv_t_y = sparse_conv_forward(&y, &w.transposed(), &back, fine.len()).unwrap();
        worst = worst.max((conv_x.dot(&y) - x.dot(&conv_t_y)).abs());
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradOp {
    Conv,
    StridedConv,
    TransposedConv,
    MaxPool,
    AvgPool,
    SumPool,
    GlobalPool,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    BatchNorm,
    Softmax,
    CrossEntropy,
    CrfIteration,
}

pub const GRAD_OPS: [GradOp; 15] = [
    GradOp::Conv,
    GradOp::StridedConv,
    GradOp::TransposedConv,
    GradOp::MaxPool,
    GradOp::AvgPool,
    GradOp::SumPool,
    GradOp::GlobalPool,
    GradOp::Relu,
    GradOp::LeakyRelu,
    GradOp::Sigmoid,
    GradOp::Tanh,
    GradOp::BatchNorm,
    GradOp::Softmax,
    GradOp::CrossEntropy,
    GradOp::CrfIteration,
];

fn region(rng: &mut impl Rng, d: usize) -> KernelRegion {
    match rng.random_range(0..3) {
        0 => KernelRegion::hypercube(d, 3).unwrap(),
        1 => KernelRegion::hypercross(d, 3).unwrap(),
        _ => KernelRegion::hybrid(&vec![3; d - 1], 3).unwrap(),
    }
}

fn pool_case(rng: &mut ChaCha8Rng, kind: u8) -> f64 {
    let d = rng.random_range(2..=3);
    let n = rng.random_range(5..30);
    let fine = random_coords(rng, d, n, 4, 2);
    let coarse = stride_coordinates(&fine, &vec![2; d]).unwrap();
    let m = Arc::new(build_kernel_map(&fine, &coarse, &KernelRegion::stride_window(d, 2).unwrap()).unwrap());
    let x = random_matrix(rng, fine.len(), 3);
    let probe = random_matrix(rng, coarse.len(), 3);
    gradient_check(&[x], &mut ParamStore::new(), 0, rng, |t, _, ids| {
        let y = match kind {
            0 => t.max_pool(ids[0], &m).unwrap(),
            1 => t.avg_pool(ids[0], m.clone()).unwrap(),
            _ => t.sum_pool(ids[0], m.clone()).unwrap(),
        };
        t.dot(y, probe.clone()).unwrap()
    })
}

fn pointwise_case(rng: &mut ChaCha8Rng, f: Option<Pointwise>) -> f64 {
    let x = random_matrix(rng, 12, 3);
    let probe = random_matrix(rng, 12, 3);
    gradient_check(&[x], &mut ParamStore::new(), 0, rng, |t, _, ids| {
        let y = match f {
            None => t.relu(ids[0]).unwrap(),
            Some(f) => t.pointwise(ids[0], f).unwrap(),
        };
        t.dot(y, probe.clone()).unwrap()
    })
}

/// Relative finite-difference error of one random instance.
pub fn gradient_case(op: GradOp, rng: &mut ChaCha8Rng) -> f64 {
    match op {
        GradOp::Conv => {
            let d = rng.random_range(2..=3);
            let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
            let n = rng.random_range(5..25);
            let c = Arc::new(random_coords(rng, d, n, 3, 2));
            let r = region(rng, d);
            let m = Arc::new(build_kernel_map(&c, &c, &r).unwrap());
            let x = random_matrix(rng, c.len(), ci);
            let probe = random_matrix(rng, c.len(), co);
            let mut params = ParamStore::new();
            let w = params.add_conv("w", r.volume(), co, ci, rng).unwrap();
            gradient_check(&[x], &mut params, 200, rng, |t, p, ids| {
                let y = t.conv(ids[0], p, w, m.clone()).unwrap();
                t.dot(y, probe.clone()).unwrap()
            })
        }
        GradOp::StridedConv => {
            let d = rng.random_range(2..=3);
            let n = rng.random_range(5..30);
            let fine = random_coords(rng, d, n, 4, 2);
            let coarse = stride_coordinates(&fine, &vec![2; d]).unwrap();
            let r = if rng.random_bool(0.5) {
                KernelRegion::stride_window(d, 2).unwrap()
            } else {
                KernelRegion::hypercube(d, 3).unwrap()
            };
            let m = Arc::new(build_kernel_map(&fine, &coarse, &r).unwrap());
            let x = random_matrix(rng, fine.len(), 2);
            let probe = random_matrix(rng, coarse.len(), 3);
            let mut params = ParamStore::new();
            let w = params.add_conv("w", r.volume(), 3, 2, rng).unwrap();
            gradient_check(&[x], &mut params, 200, rng, |t, p, ids| {
                let y = t.conv(ids[0], p, w, m.clone()).unwrap();
                t.dot(y, probe.clone()).unwrap()
            })
        }
        GradOp::TransposedConv => {
            let d = rng.random_range(2..=3);
            let n = rng.random_range(5..30);
            let fine = random_coords(rng, d, n, 4, 2);
            let coarse = stride_coordinates(&fine, &vec![2; d]).unwrap();
            let r = KernelRegion::stride_window(d, 2).unwrap();
            let m = Arc::new(build_transposed_kernel_map(&coarse, &fine, &r).unwrap());
            let x = random_matrix(rng, coarse.len(), 3);
            let probe = random_matrix(rng, fine.len(), 2);
            let mut params = ParamStore::new();
            let w = params.add_conv("w", r.volume(), 2, 3, rng).unwrap();
            gradient_check(&[x], &mut params, 200, rng, |t, p, ids| {
                let y = t.conv(ids[0], p, w, m.clone()).unwrap();
                t.dot(y, probe.clone()).unwrap()
            })
        }
        GradOp::MaxPool => pool_case(rng, 0),
        GradOp::AvgPool => pool_case(rng, 1),
        GradOp::SumPool => pool_case(rng, 2),
        GradOp::GlobalPool => {
            let n = rng.random_range(3..20);
            let c = random_coords(rng, 3, n, 4, 3);
            let batches: Vec<u32> = (0..c.len()).map(|r| c.batch(r)).collect();
            let (m, present) = global_pool_map(&batches).unwrap();
            let m = Arc::new(m);
            let x = random_matrix(rng, c.len(), 2);
            let probe = random_matrix(rng, present.len(), 2);
            let mode = rng.random_range(0..3);
            gradient_check(&[x], &mut ParamStore::new(), 0, rng, |t, _, ids| {
                let y = match mode {
                    0 => t.avg_pool(ids[0], m.clone()).unwrap(),
                    1 => t.sum_pool(ids[0], m.clone()).unwrap(),
                    _ => t.max_pool(ids[0], &m).unwrap(),
                };
                t.dot(y, probe.clone()).unwrap()
            })
        }
        GradOp::Relu => pointwise_case(rng, None),
        GradOp::LeakyRelu => pointwise_case(rng, Some(Pointwise::LeakyRelu(0.1))),
        GradOp::Sigmoid => pointwise_case(rng, Some(Pointwise::Sigmoid)),
        GradOp::Tanh => pointwise_case(rng, Some(Pointwise::Tanh)),
        GradOp::BatchNorm => {
            let (n, c) = (rng.random_range(3..20), rng.random_range(1..4));
            let x = random_matrix(rng, n, c);
            let probe = random_matrix(rng, n, c);
            let mut params = ParamStore::new();
            let g = params.add_filled("g", vec![c], 1.0).unwrap();
            let b = params.add_filled("b", vec![c], 0.0).unwrap();
            for v in params.get_mut(g).value.iter_mut() {
                *v = rng.random_range(0.5..1.5);
            }
            for v in params.get_mut(b).value.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            gradient_check(&[x], &mut params, 50, rng, |t, p, ids| {
                let mut stats = BatchNormStats::new(c);
                let y = t.batch_norm(ids[0], p, g, b, &mut stats, true).unwrap();
                t.dot(y, probe.clone()).unwrap()
            })
        }
        GradOp::Softmax => {
            let x = random_matrix(rng, 6, 4).scale(3.0);
            let probe = random_matrix(rng, 6, 4);
            gradient_check(&[x], &mut ParamStore::new(), 0, rng, |t, _, ids| {
                let y = t.softmax(ids[0]).unwrap();
                t.dot(y, probe.clone()).unwrap()
            })
        }
        GradOp::CrossEntropy => {
            let (n, c) = (rng.random_range(1..10), rng.random_range(2..5));
            let x = random_matrix(rng, n, c).scale(2.0);
            let labels: Vec<i32> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.2) {
                        IGNORE_LABEL
                    } else {
                        rng.random_range(0..c as i32)
                    }
                })
                .collect();
            gradient_check(&[x], &mut ParamStore::new(), 0, rng, |t, _, ids| {
                t.cross_entropy(ids[0], &labels, IGNORE_LABEL).unwrap()
            })
        }
        GradOp::CrfIteration => {
            let c = rng.random_range(2..4);
            let n = rng.random_range(2..10);
            let coords = random_coords(rng, 7, n, 1, 1);
            let kernel = CompatibilityKernel::new(c).unwrap();
            let m = Arc::new(kernel.neighbor_map(&coords).unwrap());
            let mut params = ParamStore::new();
            let pw = kernel.register(&mut params).unwrap();
            for v in params.get_mut(pw).value.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let u = random_matrix(rng, coords.len(), c);
            let labels: Vec<i32> = (0..coords.len()).map(|_| rng.random_range(0..c as i32)).collect();
            let iters = rng.random_range(1..=3);
            gradient_check(&[u], &mut params, 200, rng, |t, p, ids| {
                let q = ts_crf_on_tape(t, ids[0], p, pw, m.clone(), iters).unwrap();
                t.nll_of_probs(q, &labels, IGNORE_LABEL).unwrap()
            })
        }
    }
}

/// Worst error of `op` over the standard set of seeded instances.
pub fn gradient_worst(op: GradOp) -> f64 {
    (0..GRADIENT_INSTANCES)
        .map(|seed| gradient_case(op, &mut ChaCha8Rng::seed_from_u64(seed * 7919 + 13)))
        .fold(0.0, f64::max)
}
