//! Forward and backward kernels for sparse convolution, pooling and the
//! feature-only (non-spatial) functions.
//!
//! Every routine accumulates in `f64` regardless of the storage type and walks
//! the kernel map in its fixed offset/pair order, so results are reproducible
//! bit for bit.

use crate::coords::CoordinateMap;
use crate::error::{Error, Result};
use crate::kernel::{build_transposed_kernel_map, KernelMap, KernelRegion};
use crate::matrix::{Matrix, Scalar};

/// One `c_out × c_in` matrix per kernel offset, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T = f64> {
    volume: usize,
    c_out: usize,
    c_in: usize,
    data: Vec<T>,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn zeros(volume: usize, c_out: usize, c_in: usize) -> Self {
        Self {
            volume,
            c_out,
            c_in,
            data: vec![T::default(); volume * c_out * c_in],
        }
    }

    pub fn from_vec(volume: usize, c_out: usize, c_in: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != volume * c_out * c_in {
            return Err(Error::ShapeMismatch {
                what: "convolution weights".into(),
                expected: vec![volume, c_out, c_in],
                got: vec![data.len()],
            });
        }
        Ok(Self {
            volume,
            c_out,
            c_in,
            data,
        })
    }

    pub fn from_fn(
        volume: usize,
        c_out: usize,
        c_in: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(volume * c_out * c_in);
        for k in 0..volume {
            for o in 0..c_out {
                for i in 0..c_in {
                    data.push(f(k, o, i));
                }
            }
        }
        Self {
            volume,
            c_out,
            c_in,
            data,
        }
    }

    pub fn volume(&self) -> usize {
        self.volume
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Matrix of offset `k` as a row-major `c_out × c_in` slice.
    pub fn matrix(&self, k: usize) -> &[T] {
        let n = self.c_out * self.c_in;
        &self.data[k * n..(k + 1) * n]
    }

    /// Per-offset transposes: a `c_in × c_out` kernel.
    pub fn transposed(&self) -> Self {
        Self::from_fn(self.volume, self.c_in, self.c_out, |k, o, i| {
            self.data[(k * self.c_out + i) * self.c_in + o]
        })
    }
}

/// Borrowed view of kernel weights; lets the autograd tape run the kernels on
/// parameter storage without copying.
#[derive(Debug, Clone, Copy)]
pub struct WeightsRef<'a, T> {
    pub volume: usize,
    pub c_out: usize,
    pub c_in: usize,
    pub data: &'a [T],
}

impl<'a, T: Scalar> From<&'a ConvWeights<T>> for WeightsRef<'a, T> {
    fn from(w: &'a ConvWeights<T>) -> Self {
        Self {
            volume: w.volume,
            c_out: w.c_out,
            c_in: w.c_in,
            data: &w.data,
        }
    }
}

fn check_map_against(m: &KernelMap, volume: usize, n_in: usize) -> Result<()> {
    if m.volume() != volume {
        return Err(Error::ShapeMismatch {
            what: "kernel volume".into(),
            expected: vec![m.volume()],
            got: vec![volume],
        });
    }
    if m.n_in() != n_in {
        return Err(Error::IndexOutOfRange {
            index: m.n_in().saturating_sub(1),
            len: n_in,
        });
    }
    Ok(())
}

/// Generalized sparse convolution: zero the output, then for each offset
/// gather the mapped input rows, multiply the block by `W_k`, and
/// scatter-add into the mapped output rows.
pub fn sparse_conv_forward<T: Scalar>(
    f_in: &Matrix<T>,
    w: &ConvWeights<T>,
    m: &KernelMap,
    n_out: usize,
) -> Result<Matrix<T>> {
    Ok(conv_forward_f64(f_in, w.into(), m, n_out)?.cast())
}

pub(crate) fn conv_forward_f64<T: Scalar>(
    f_in: &Matrix<T>,
    w: WeightsRef<'_, T>,
    m: &KernelMap,
    n_out: usize,
) -> Result<Matrix<f64>> {
    if f_in.cols() != w.c_in {
        return Err(Error::ChannelMismatch {
            expected: w.c_in,
            got: f_in.cols(),
        });
    }
    check_map_against(m, w.volume, f_in.rows())?;
    if m.n_out() != n_out {
        return Err(Error::ShapeMismatch {
            what: "output rows".into(),
            expected: vec![m.n_out()],
            got: vec![n_out],
        });
    }
    let (c_in, c_out) = (w.c_in, w.c_out);
    let mut out = Matrix::<f64>::zeros(n_out, c_out);
    let mut block = Vec::new();
    let mut product = Vec::new();
    for (k, pairs) in m.entries().iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let wk = &w.data[k * c_out * c_in..(k + 1) * c_out * c_in];
        // gather
        block.clear();
        for &i in &pairs.input {
            block.extend(f_in.row(i as usize).iter().map(|v| v.to_f64()));
        }
        // dense multiply: product = block · W_kᵀ
        product.clear();
        product.resize(pairs.len() * c_out, 0.0);
        for (x, y) in block.chunks_exact(c_in).zip(product.chunks_exact_mut(c_out)) {
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &wk[o * c_in..(o + 1) * c_in];
                let mut acc = 0.0;
                for (a, b) in row.iter().zip(x) {
                    acc += a.to_f64() * b;
                }
                *yo = acc;
            }
        }
        // scatter-add
        for (y, &o) in product.chunks_exact(c_out).zip(&pairs.output) {
            for (dst, v) in out.row_mut(o as usize).iter_mut().zip(y) {
                *dst += v;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`sparse_conv_forward`] with respect to its input features and
/// weights.
pub fn sparse_conv_backward<T: Scalar>(
    grad_out: &Matrix<T>,
    f_in: &Matrix<T>,
    w: &ConvWeights<T>,
    m: &KernelMap,
) -> Result<(Matrix<T>, ConvWeights<T>)> {
    let (gx, gw) = conv_backward_f64(grad_out, f_in, w.into(), m)?;
    let gw = ConvWeights::from_vec(
        w.volume,
        w.c_out,
        w.c_in,
        gw.into_iter().map(T::from_f64).collect(),
    )?;
    Ok((gx.cast(), gw))
}

pub(crate) fn conv_backward_f64<T: Scalar>(
    grad_out: &Matrix<T>,
    f_in: &Matrix<T>,
    w: WeightsRef<'_, T>,
    m: &KernelMap,
) -> Result<(Matrix<f64>, Vec<f64>)> {
    let (c_in, c_out) = (w.c_in, w.c_out);
    if f_in.cols() != c_in {
        return Err(Error::ChannelMismatch {
            expected: c_in,
            got: f_in.cols(),
        });
    }
    if grad_out.cols() != c_out {
        return Err(Error::ChannelMismatch {
            expected: c_out,
            got: grad_out.cols(),
        });
    }
    check_map_against(m, w.volume, f_in.rows())?;
    if m.n_out() != grad_out.rows() {
        return Err(Error::IndexOutOfRange {
            index: m.n_out().saturating_sub(1),
            len: grad_out.rows(),
        });
    }
    let mut gx = Matrix::<f64>::zeros(f_in.rows(), c_in);
    let mut gw = vec![0.0; w.volume * c_out * c_in];
    for (k, pairs) in m.entries().iter().enumerate() {
        let wk = &w.data[k * c_out * c_in..(k + 1) * c_out * c_in];
        let gwk = &mut gw[k * c_out * c_in..(k + 1) * c_out * c_in];
        for (&i, &o) in pairs.input.iter().zip(&pairs.output) {
            let g = grad_out.row(o as usize);
            let x = f_in.row(i as usize);
            let gxi = gx.row_mut(i as usize);
            for (oc, gv) in g.iter().enumerate() {
                let gv = gv.to_f64();
                if gv == 0.0 {
                    continue;
                }
                let wrow = &wk[oc * c_in..(oc + 1) * c_in];
                let gwrow = &mut gwk[oc * c_in..(oc + 1) * c_in];
                for ic in 0..c_in {
                    gxi[ic] += wrow[ic].to_f64() * gv;
                    gwrow[ic] += gv * x[ic].to_f64();
                }
            }
        }
    }
    Ok((gx, gw))
}

/// Transposed convolution from `c_in` (coarse) onto `c_out` (fine): the
/// forward kernel map `c_out -> c_in` with its roles reversed.
pub fn transposed_conv_forward<T: Scalar>(
    f_in: &Matrix<T>,
    w: &ConvWeights<T>,
    region: &KernelRegion,
    c_in: &CoordinateMap,
    c_out: &CoordinateMap,
) -> Result<Matrix<T>> {
    let m = build_transposed_kernel_map(c_in, c_out, region)?;
    sparse_conv_forward(f_in, w, &m, c_out.len())
}

fn check_pool_input<T: Scalar>(f_in: &Matrix<T>, m: &KernelMap) -> Result<Vec<u32>> {
    if m.n_in() != f_in.rows() {
        return Err(Error::IndexOutOfRange {
            index: m.n_in().saturating_sub(1),
            len: f_in.rows(),
        });
    }
    let fan_in = m.fan_in();
    if let Some(row) = fan_in.iter().position(|&c| c == 0) {
        return Err(Error::EmptyPoolingRow(row));
    }
    Ok(fan_in)
}

/// Per-output, per-channel maximum over all mapped inputs. Returns the output
/// and, for each `(row, channel)`, the input row that won. Ties go to the
/// earliest pair in concatenated offset order.
pub fn max_pool<T: Scalar>(f_in: &Matrix<T>, m: &KernelMap) -> Result<(Matrix<T>, Vec<u32>)> {
    check_pool_input(f_in, m)?;
    let c = f_in.cols();
    let n_out = m.n_out();
    let mut best = vec![f64::NEG_INFINITY; n_out * c];
    let mut arg = vec![u32::MAX; n_out * c];
    for pairs in m.entries() {
        for (&i, &o) in pairs.input.iter().zip(&pairs.output) {
            let x = f_in.row(i as usize);
            let base = o as usize * c;
            for ch in 0..c {
                let v = x[ch].to_f64();
                if arg[base + ch] == u32::MAX || v > best[base + ch] {
                    best[base + ch] = v;
                    arg[base + ch] = i;
                }
            }
        }
    }
    let out = Matrix::from_vec(n_out, c, best.into_iter().map(T::from_f64).collect())?;
    Ok((out, arg))
}

/// Routes each output gradient to the input that won the max.
pub fn max_pool_backward(grad_out: &Matrix<f64>, argmax: &[u32], n_in: usize) -> Matrix<f64> {
    let c = grad_out.cols();
    let mut gx = Matrix::zeros(n_in, c);
    for r in 0..grad_out.rows() {
        for ch in 0..c {
            let i = argmax[r * c + ch] as usize;
            let v = gx.get(i, ch) + grad_out.get(r, ch);
            gx.set(i, ch, v);
        }
    }
    gx
}

fn scatter_sum<T: Scalar>(f_in: &Matrix<T>, m: &KernelMap) -> Matrix<f64> {
    let c = f_in.cols();
    let mut out = Matrix::<f64>::zeros(m.n_out(), c);
    for pairs in m.entries() {
        for (&i, &o) in pairs.input.iter().zip(&pairs.output) {
            for (dst, v) in out.row_mut(o as usize).iter_mut().zip(f_in.row(i as usize)) {
                *dst += v.to_f64();
            }
        }
    }
    out
}

/// Scatter-sum divided by each output's input count.
pub fn avg_pool<T: Scalar>(f_in: &Matrix<T>, m: &KernelMap) -> Result<Matrix<T>> {
    let counts = check_pool_input(f_in, m)?;
    let mut out = scatter_sum(f_in, m);
    for (r, &n) in counts.iter().enumerate() {
        let inv = 1.0 / n as f64;
        for v in out.row_mut(r) {
            *v *= inv;
        }
    }
    Ok(out.cast())
}

/// Scatter-sum without normalization, which keeps density information.
pub fn sum_pool<T: Scalar>(f_in: &Matrix<T>, m: &KernelMap) -> Result<Matrix<T>> {
    check_pool_input(f_in, m)?;
    Ok(scatter_sum(f_in, m).cast())
}

/// Backward of sum pooling, or of average pooling when `counts` is given.
pub fn pool_backward(grad_out: &Matrix<f64>, m: &KernelMap, counts: Option<&[u32]>) -> Matrix<f64> {
    let c = grad_out.cols();
    let mut gx = Matrix::zeros(m.n_in(), c);
    for pairs in m.entries() {
        for (&i, &o) in pairs.input.iter().zip(&pairs.output) {
            let scale = counts.map_or(1.0, |n| 1.0 / n[o as usize] as f64);
            for (dst, g) in gx.row_mut(i as usize).iter_mut().zip(grad_out.row(o as usize)) {
                *dst += g * scale;
            }
        }
    }
    gx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalPoolMode {
    Average,
    Sum,
    Max,
}

/// Kernel map sending every row of a batch to that batch's single output row.
/// Output rows follow ascending batch index; the batch list is returned too.
pub fn global_pool_map(batch_of_each_row: &[u32]) -> Result<(KernelMap, Vec<u32>)> {
    let mut batches: Vec<u32> = batch_of_each_row.to_vec();
    batches.sort_unstable();
    batches.dedup();
    let target: Vec<u32> = batch_of_each_row
        .iter()
        .map(|b| batches.binary_search(b).expect("batch present") as u32)
        .collect();
    let m = KernelMap::from_assignment(1, batches.len(), &target)?;
    Ok((m, batches))
}

/// One output row per batch present in `batch_of_each_row`.
pub fn global_pool<T: Scalar>(
    f_in: &Matrix<T>,
    batch_of_each_row: &[u32],
    mode: GlobalPoolMode,
) -> Result<(Matrix<T>, Vec<u32>)> {
    if batch_of_each_row.len() != f_in.rows() {
        return Err(Error::ShapeMismatch {
            what: "batch indices vs rows".into(),
            expected: vec![f_in.rows()],
            got: vec![batch_of_each_row.len()],
        });
    }
    let (m, batches) = global_pool_map(batch_of_each_row)?;
    let out = match mode {
        GlobalPoolMode::Average => avg_pool(f_in, &m)?,
        GlobalPoolMode::Sum => sum_pool(f_in, &m)?,
        GlobalPoolMode::Max => max_pool(f_in, &m)?.0,
    };
    Ok((out, batches))
}

/// Elementwise functions applied directly to the feature matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pointwise {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Pointwise {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Pointwise::Relu => x.max(0.0),
            Pointwise::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Pointwise::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Pointwise::Tanh => x.tanh(),
        }
    }

    /// Derivative at input `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Pointwise::Sigmoid => {
                let s = self.apply(x);
                s * (1.0 - s)
            }
            Pointwise::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

pub fn apply_pointwise<T: Scalar>(f: &Matrix<T>, func: Pointwise) -> Matrix<T> {
    f.map(|v| T::from_f64(func.apply(v.to_f64())))
}

pub fn pointwise_backward(grad_out: &Matrix<f64>, input: &Matrix<f64>, func: Pointwise) -> Matrix<f64> {
    Matrix::from_fn(input.rows(), input.cols(), |r, c| {
        grad_out.get(r, c) * func.derivative(input.get(r, c))
    })
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BATCH_NORM_MOMENTUM,
            eps: BATCH_NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Saved values for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: Matrix<f64>,
    pub inv_std: Vec<f64>,
    /// Eval-mode passes treat the statistics as constants.
    pub batch_statistics: bool,
}

fn check_bn(f: &Matrix<f64>, gamma: &[f64], beta: &[f64], stats: &BatchNormStats) -> Result<()> {
    let c = f.cols();
    for got in [gamma.len(), beta.len(), stats.channels()] {
        if got != c {
            return Err(Error::ChannelMismatch { expected: c, got });
        }
    }
    Ok(())
}

/// Per-channel normalization over all rows. Training mode uses batch
/// statistics and updates the running ones; eval mode uses the running ones.
pub fn batch_norm(
    f: &Matrix<f64>,
    gamma: &[f64],
    beta: &[f64],
    stats: &mut BatchNormStats,
    training: bool,
) -> Result<(Matrix<f64>, BatchNormCache)> {
    check_bn(f, gamma, beta, stats)?;
    let (n, c) = f.shape();
    let use_batch = training && n > 0;
    let (mean, var) = if use_batch {
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(f.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(f.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        for ch in 0..c {
            stats.running_mean[ch] =
                (1.0 - stats.momentum) * stats.running_mean[ch] + stats.momentum * mean[ch];
            stats.running_var[ch] =
                (1.0 - stats.momentum) * stats.running_var[ch] + stats.momentum * var[ch] * unbias;
        }
        (mean, var)
    } else {
        (stats.running_mean.clone(), stats.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
    let normalized = Matrix::from_fn(n, c, |r, ch| (f.get(r, ch) - mean[ch]) * inv_std[ch]);
    let out = Matrix::from_fn(n, c, |r, ch| normalized.get(r, ch) * gamma[ch] + beta[ch]);
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            batch_statistics: use_batch,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward(
    grad_out: &Matrix<f64>,
    cache: &BatchNormCache,
    gamma: &[f64],
) -> (Matrix<f64>, Vec<f64>, Vec<f64>) {
    let (n, c) = grad_out.shape();
    let xhat = &cache.normalized;
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for r in 0..n {
        for ch in 0..c {
            let g = grad_out.get(r, ch);
            g_beta[ch] += g;
            g_gamma[ch] += g * xhat.get(r, ch);
        }
    }
    let gx = if cache.batch_statistics {
        let nf = n as f64;
        // dx = inv_std / n * (n·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), with dx̂ = g·γ
        Matrix::from_fn(n, c, |r, ch| {
            let dxhat = grad_out.get(r, ch) * gamma[ch];
            cache.inv_std[ch] / nf
                * (nf * dxhat - gamma[ch] * g_beta[ch] - xhat.get(r, ch) * gamma[ch] * g_gamma[ch])
        })
    } else {
        Matrix::from_fn(n, c, |r, ch| grad_out.get(r, ch) * gamma[ch] * cache.inv_std[ch])
    };
    (gx, g_gamma, g_beta)
}

/// Row-wise softmax, computed in a numerically stable way.
pub fn softmax_rows(x: &Matrix<f64>) -> Matrix<f64> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of [`softmax_rows`] given its output.
pub fn softmax_backward(grad_out: &Matrix<f64>, softmax: &Matrix<f64>) -> Matrix<f64> {
    let mut gx = Matrix::zeros(softmax.rows(), softmax.cols());
    for r in 0..softmax.rows() {
        let s = softmax.row(r);
        let g = grad_out.row(r);
        let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
        for (dst, (sv, gv)) in gx.row_mut(r).iter_mut().zip(s.iter().zip(g)) {
            *dst = sv * (gv - dot);
        }
    }
    gx
}
