//! Independent oracles shared by the integration suites. Nothing here calls
//! into the kernel-map or convolution code it is used to check.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use mink_core::autograd::{ParamStore, Tape, ValueId};
use mink_core::coords::IGNORE_LABEL;
use mink_core::{CoordinateMap, Matrix};
use rand::Rng;

/// Distinct random keys `[batch, x..]` with components in `-extent..extent`.
/// `n` is capped at the number of available keys.
pub fn random_keys(rng: &mut impl Rng, d: usize, n: usize, extent: i32, batches: u32) -> Vec<i32> {
    let capacity = (2 * extent as u64)
        .checked_pow(d as u32)
        .and_then(|c| c.checked_mul(batches as u64))
        .unwrap_or(u64::MAX);
    let n = n.min(usize::try_from(capacity).unwrap_or(usize::MAX));
    let mut seen = HashSet::new();
    let mut keys = Vec::with_capacity(n * (d + 1));
    while seen.len() < n {
        let mut k = vec![rng.random_range(0..batches) as i32];
        k.extend((0..d).map(|_| rng.random_range(-extent..extent)));
        if seen.insert(k.clone()) {
            keys.extend(k);
        }
    }
    keys
}

pub fn random_coords(rng: &mut impl Rng, d: usize, n: usize, extent: i32, batches: u32) -> CoordinateMap {
    CoordinateMap::from_keys(d, vec![1; d], random_keys(rng, d, n, extent, batches)).unwrap()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Visit every multi-index of `dims` in row-major order.
pub fn for_each_index(dims: &[usize], mut f: impl FnMut(&[usize])) {
    if dims.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; dims.len()];
    loop {
        f(&idx);
        let mut axis = dims.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < dims[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Dense, zero-padded convolution on a fully occupied grid of shape `dims`.
///
/// `x` is indexed `[flat grid index][channel]`. The output lives on grid
/// points whose every coordinate is a multiple of `stride`, visited in
/// row-major order; each value is `Σ_offset w(offset) · x[u + offset]` with
/// the offset ranging over `[-(k/2), k/2]^D` and out-of-grid reads giving 0.
pub fn dense_conv(
    dims: &[usize],
    x: &[Vec<f64>],
    c_out: usize,
    k: usize,
    stride: usize,
    w: impl Fn(&[i32], usize, usize) -> f64,
) -> Vec<(Vec<usize>, Vec<f64>)> {
    let d = dims.len();
    let r = (k / 2) as i64;
    let out_dims: Vec<usize> = dims.iter().map(|&g| g.div_ceil(stride)).collect();
    let flat = |p: &[i64]| -> Option<usize> {
        let mut f = 0usize;
        for (axis, &v) in p.iter().enumerate() {
            if v < 0 || v >= dims[axis] as i64 {
                return None;
            }
            f = f * dims[axis] + v as usize;
        }
        Some(f)
    };
    let mut out = Vec::new();
    for_each_index(&out_dims, |j| {
        let u: Vec<usize> = j.iter().map(|&v| v * stride).collect();
        let mut acc = vec![0.0; c_out];
        for_each_index(&vec![k; d], |o| {
            let offset: Vec<i32> = o.iter().map(|&v| v as i32 - r as i32).collect();
            let p: Vec<i64> = u.iter().zip(&offset).map(|(&a, &b)| a as i64 + b as i64).collect();
            if let Some(src) = flat(&p) {
                for (co, a) in acc.iter_mut().enumerate() {
                    for (ci, xv) in x[src].iter().enumerate() {
                        *a += w(&offset, co, ci) * xv;
                    }
                }
            }
        });
        out.push((u, acc));
    });
    out
}

/// Smooth deterministic weight for an offset, used to fill kernels in an
/// order-independent way.
pub fn offset_weight(seed: u64, offset: &[i32], co: usize, ci: usize) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &v in offset {
        h = (h ^ (v as i64 as u64)).wrapping_mul(0x0100_0000_01b3);
    }
    h = (h ^ co as u64).wrapping_mul(0x0100_0000_01b3);
    h = (h ^ ci as u64).wrapping_mul(0x0100_0000_01b3);
    h ^= h >> 29;
    ((h % 20_001) as f64 / 10_000.0) - 1.0
}

/// Label per voxel by the collision rule: the shared label if every point in
/// the voxel agrees, otherwise the ignore label.
pub fn brute_force_labels(
    points: &[Vec<f64>],
    batches: &[u32],
    labels: &[i32],
    voxel: f64,
) -> BTreeMap<(u32, Vec<i64>), i32> {
    let mut out: BTreeMap<(u32, Vec<i64>), i32> = BTreeMap::new();
    for ((p, &b), &l) in points.iter().zip(batches).zip(labels) {
        let key = (b, p.iter().map(|v| (v / voxel).floor() as i64).collect());
        out.entry(key)
            .and_modify(|e| {
                if *e != l {
                    *e = IGNORE_LABEL;
                }
            })
            .or_insert(l);
    }
    out
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Mean-field updates written node by node:
/// `Q_i(a) ∝ exp(u_i(a) + Σ_{j ≠ i, x_j − x_i ∈ offsets} Σ_b φ(x_j − x_i)[a][b] Q_j(b))`.
/// `nodes` are `[batch, 7 coordinates]`; `pairwise` lists `(offset, C×C)`.
pub fn crf_direct(
    nodes: &[Vec<i32>],
    unary: &[Vec<f64>],
    pairwise: &[(Vec<i32>, Vec<Vec<f64>>)],
    iterations: usize,
) -> Vec<Vec<f64>> {
    let c = unary.first().map_or(0, Vec::len);
    let mut q: Vec<Vec<f64>> = unary.iter().map(|u| softmax(u)).collect();
    for _ in 0..iterations {
        let mut next = Vec::with_capacity(nodes.len());
        for (i, xi) in nodes.iter().enumerate() {
            let mut e = unary[i].clone();
            for (j, xj) in nodes.iter().enumerate() {
                if i == j || xi[0] != xj[0] {
                    continue;
                }
                let delta: Vec<i32> = xj[1..].iter().zip(&xi[1..]).map(|(a, b)| a - b).collect();
                for (off, phi) in pairwise {
                    if *off == delta {
                        for a in 0..c {
                            for b in 0..c {
                                e[a] += phi[a][b] * q[j][b];
                            }
                        }
                    }
                }
            }
            next.push(softmax(&e));
        }
        q = next;
    }
    q
}

/// Norm-wise relative error `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub mod criteria;

pub const FD_STEP: f64 = 1e-5;

/// Compare tape gradients with central differences for every leaf entry and
/// up to `param_samples` entries of every parameter. `build` records the
/// scalar loss from the leaf ids; it is rerun for each perturbation.
pub fn gradient_check(
    leaves: &[Matrix],
    params: &mut ParamStore,
    param_samples: usize,
    rng: &mut impl Rng,
    build: impl Fn(&mut Tape, &ParamStore, &[ValueId]) -> ValueId,
) -> f64 {
    let eval = |leaves: &[Matrix], params: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<ValueId> = leaves.iter().map(|m| t.leaf(m.clone())).collect();
        let loss = build(&mut t, params, &ids);
        t.value(loss).unwrap().get(0, 0)
    };

    params.zero_grad();
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, params, &ids);
    let grads = tape.backward(loss, params).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = leaves.to_vec();
    for (li, id) in ids.iter().enumerate() {
        let g = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(leaves[li].rows(), leaves[li].cols()));
        for e in 0..leaves[li].as_slice().len() {
            let orig = work[li].as_slice()[e];
            work[li].as_mut_slice()[e] = orig + FD_STEP;
            let plus = eval(&work, params);
            work[li].as_mut_slice()[e] = orig - FD_STEP;
            let minus = eval(&work, params);
            work[li].as_mut_slice()[e] = orig;
            analytic.push(g.as_slice()[e]);
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    let ids: Vec<_> = params.ids().collect();
    for pid in ids {
        let n = params.get(pid).numel();
        let picks: Vec<usize> = if n <= param_samples {
            (0..n).collect()
        } else {
            (0..param_samples).map(|_| rng.random_range(0..n)).collect()
        };
        for e in picks {
            let orig = params.get(pid).value[e];
            params.get_mut(pid).value[e] = orig + FD_STEP;
            let plus = eval(leaves, params);
            params.get_mut(pid).value[e] = orig - FD_STEP;
            let minus = eval(leaves, params);
            params.get_mut(pid).value[e] = orig;
            analytic.push(params.get(pid).grad[e]);
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    relative_error(&analytic, &numeric)
}
