//! Reverse-mode differentiation over feature matrices.
//!
//! A [`Tape`] records every operation of one forward pass in execution order.
//! [`Tape::backward`] walks the records once in reverse, accumulating
//! gradients for recorded values and for the [`ParamStore`] parameters the
//! operations referenced.

pub mod checkpoint;
pub mod optim;
pub mod params;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernel::KernelMap;
use crate::matrix::Matrix;
use crate::sparse_ops::{self, BatchNormCache, BatchNormStats, Pointwise, WeightsRef};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, NamedBlob};
pub use optim::{sgd_step, PolySchedule, DEFAULT_MOMENTUM};
pub use params::{ParamId, ParamStore, Parameter};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv {
        input: usize,
        weight: ParamId,
        map: Arc<KernelMap>,
    },
    AddBias {
        input: usize,
        bias: ParamId,
    },
    Pointwise {
        input: usize,
        func: Pointwise,
    },
    BatchNorm {
        input: usize,
        gamma: ParamId,
        beta: ParamId,
        cache: BatchNormCache,
    },
    Add {
        a: usize,
        b: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<u32>,
    },
    AvgPool {
        input: usize,
        map: Arc<KernelMap>,
        counts: Vec<u32>,
    },
    SumPool {
        input: usize,
        map: Arc<KernelMap>,
    },
    Gather {
        input: usize,
        rows: Vec<u32>,
    },
    Softmax {
        input: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<i32>,
        ignore: i32,
        probs: Matrix,
        count: usize,
    },
    NllOfProbs {
        probs: usize,
        labels: Vec<i32>,
        ignore: i32,
        count: usize,
    },
    Sum {
        input: usize,
    },
    Dot {
        input: usize,
        weights: Matrix,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every recorded value with respect to the loss.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the value does not influence the loss.
    pub fn get(&self, id: ValueId) -> Option<&Matrix> {
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(id.index).and_then(Option::as_ref)
    }
}

fn param_shape_err(params: &ParamStore, id: ParamId, expected: Vec<usize>) -> Error {
    Error::ShapeMismatch {
        what: format!("parameter `{}`", params.get(id).name),
        expected,
        got: params.get(id).dims.clone(),
    }
}

fn conv_weights(params: &ParamStore, id: ParamId) -> Result<WeightsRef<'_, f64>> {
    let p = params.get(id);
    if p.dims.len() != 3 {
        return Err(param_shape_err(params, id, vec![0, 0, 0]));
    }
    Ok(WeightsRef {
        volume: p.dims[0],
        c_out: p.dims[1],
        c_in: p.dims[2],
        data: &p.value,
    })
}

fn check_labels(labels: &[i32], rows: usize, classes: usize, ignore: i32) -> Result<usize> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            what: "labels vs rows".into(),
            expected: vec![rows],
            got: vec![labels.len()],
        });
    }
    let mut count = 0;
    for &l in labels {
        if l == ignore {
            continue;
        }
        if l < 0 || l as usize >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} outside 0..{classes}"
            )));
        }
        count += 1;
    }
    Ok(count)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn index(&self, id: ValueId) -> Result<usize> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(Error::ForeignValue);
        }
        Ok(id.index)
    }

    pub fn value(&self, id: ValueId) -> Result<&Matrix> {
        Ok(&self.nodes[self.index(id)?].value)
    }

    pub fn leaf(&mut self, value: Matrix) -> ValueId {
        self.push(value, Op::Leaf)
    }

    /// Sparse convolution with a `[volume, c_out, c_in]` kernel parameter.
    pub fn conv(
        &mut self,
        x: ValueId,
        params: &ParamStore,
        weight: ParamId,
        map: Arc<KernelMap>,
    ) -> Result<ValueId> {
        let input = self.index(x)?;
        let w = conv_weights(params, weight)?;
        let out = sparse_ops::conv_forward_f64(&self.nodes[input].value, w, &map, map.n_out())?;
        Ok(self.push(out, Op::Conv { input, weight, map }))
    }

    pub fn add_bias(&mut self, x: ValueId, params: &ParamStore, bias: ParamId) -> Result<ValueId> {
        let input = self.index(x)?;
        let b = &params.get(bias).value;
        let v = &self.nodes[input].value;
        if b.len() != v.cols() {
            return Err(param_shape_err(params, bias, vec![v.cols()]));
        }
        let out = Matrix::from_fn(v.rows(), v.cols(), |r, c| v.get(r, c) + b[c]);
        Ok(self.push(out, Op::AddBias { input, bias }))
    }

    pub fn pointwise(&mut self, x: ValueId, func: Pointwise) -> Result<ValueId> {
        let input = self.index(x)?;
        let out = sparse_ops::apply_pointwise(&self.nodes[input].value, func);
        Ok(self.push(out, Op::Pointwise { input, func }))
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.pointwise(x, Pointwise::Relu)
    }

    pub fn batch_norm(
        &mut self,
        x: ValueId,
        params: &ParamStore,
        gamma: ParamId,
        beta: ParamId,
        stats: &mut BatchNormStats,
        training: bool,
    ) -> Result<ValueId> {
        let input = self.index(x)?;
        let (out, cache) = sparse_ops::batch_norm(
            &self.nodes[input].value,
            &params.get(gamma).value,
            &params.get(beta).value,
            stats,
            training,
        )?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                what: "addition operands".into(),
                expected: vec![va.rows(), va.cols()],
                got: vec![vb.rows(), vb.cols()],
            });
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        let out = self.nodes[a].value.hcat(&self.nodes[b].value)?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    pub fn max_pool(&mut self, x: ValueId, map: &KernelMap) -> Result<ValueId> {
        let input = self.index(x)?;
        let (out, argmax) = sparse_ops::max_pool(&self.nodes[input].value, map)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn avg_pool(&mut self, x: ValueId, map: Arc<KernelMap>) -> Result<ValueId> {
        let input = self.index(x)?;
        let out = sparse_ops::avg_pool(&self.nodes[input].value, &map)?;
        let counts = map.fan_in();
        Ok(self.push(out, Op::AvgPool { input, map, counts }))
    }

    pub fn sum_pool(&mut self, x: ValueId, map: Arc<KernelMap>) -> Result<ValueId> {
        let input = self.index(x)?;
        let out = sparse_ops::sum_pool(&self.nodes[input].value, &map)?;
        Ok(self.push(out, Op::SumPool { input, map }))
    }

    /// Output row `r` is input row `rows[r]`.
    pub fn gather(&mut self, x: ValueId, rows: Vec<u32>) -> Result<ValueId> {
        let input = self.index(x)?;
        let n = self.nodes[input].value.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r as usize >= n) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                len: n,
            });
        }
        let out = self.nodes[input].value.gather_rows(&rows);
        Ok(self.push(out, Op::Gather { input, rows }))
    }

    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let input = self.index(x)?;
        let out = sparse_ops::softmax_rows(&self.nodes[input].value);
        Ok(self.push(out, Op::Softmax { input }))
    }

    /// Mean negative log-softmax over rows whose label is not `ignore`;
    /// zero when every row is ignored.
    pub fn cross_entropy(&mut self, logits: ValueId, labels: &[i32], ignore: i32) -> Result<ValueId> {
        let li = self.index(logits)?;
        let z = &self.nodes[li].value;
        let count = check_labels(labels, z.rows(), z.cols(), ignore)?;
        let probs = sparse_ops::softmax_rows(z);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            if l == ignore {
                continue;
            }
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l as usize];
        }
        if count > 0 {
            loss /= count as f64;
        }
        let out = Matrix::from_vec(1, 1, vec![loss])?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
        ))
    }

    /// Mean `−log p[label]` for rows of a probability matrix.
    pub fn nll_of_probs(&mut self, probs: ValueId, labels: &[i32], ignore: i32) -> Result<ValueId> {
        let pi = self.index(probs)?;
        let p = &self.nodes[pi].value;
        let count = check_labels(labels, p.rows(), p.cols(), ignore)?;
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            if l != ignore {
                loss -= p.get(r, l as usize).max(f64::MIN_POSITIVE).ln();
            }
        }
        if count > 0 {
            loss /= count as f64;
        }
        let out = Matrix::from_vec(1, 1, vec![loss])?;
        Ok(self.push(
            out,
            Op::NllOfProbs {
                probs: pi,
                labels: labels.to_vec(),
                ignore,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let input = self.index(x)?;
        let out = Matrix::from_vec(1, 1, vec![self.nodes[input].value.sum()])?;
        Ok(self.push(out, Op::Sum { input }))
    }

    /// `Σ weights ⊙ x`, a scalar.
    pub fn dot(&mut self, x: ValueId, weights: Matrix) -> Result<ValueId> {
        let input = self.index(x)?;
        let v = &self.nodes[input].value;
        if v.shape() != weights.shape() {
            return Err(Error::ShapeMismatch {
                what: "dot operands".into(),
                expected: vec![v.rows(), v.cols()],
                got: vec![weights.rows(), weights.cols()],
            });
        }
        let out = Matrix::from_vec(1, 1, vec![v.dot(&weights)])?;
        Ok(self.push(out, Op::Dot { input, weights }))
    }

    /// Backpropagate from the scalar `loss`, adding parameter gradients into
    /// `params` (which are not zeroed first).
    pub fn backward(&self, loss: ValueId, params: &mut ParamStore) -> Result<Gradients> {
        let root = self.index(loss)?;
        let (rows, cols) = self.nodes[root].value.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        fn accumulate(grads: &mut [Option<Matrix>], at: usize, g: Matrix) {
            match &mut grads[at] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv { input, weight, map } => {
                    let w = conv_weights(params, *weight)?;
                    let (gx, gw) =
                        sparse_ops::conv_backward_f64(&g, &self.nodes[*input].value, w, map)?;
                    for (dst, v) in params.get_mut(*weight).grad.iter_mut().zip(gw) {
                        *dst += v;
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::AddBias { input, bias } => {
                    let pg = &mut params.get_mut(*bias).grad;
                    for r in 0..g.rows() {
                        for (dst, v) in pg.iter_mut().zip(g.row(r)) {
                            *dst += v;
                        }
                    }
                    accumulate(&mut grads, *input, g.clone());
                }
                Op::Pointwise { input, func } => {
                    let gx = sparse_ops::pointwise_backward(&g, &self.nodes[*input].value, *func);
                    accumulate(&mut grads, *input, gx);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (gx, gg, gb) =
                        sparse_ops::batch_norm_backward(&g, cache, &params.get(*gamma).value);
                    for (dst, v) in params.get_mut(*gamma).grad.iter_mut().zip(gg) {
                        *dst += v;
                    }
                    for (dst, v) in params.get_mut(*beta).grad.iter_mut().zip(gb) {
                        *dst += v;
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = g.hsplit(self.nodes[*a].value.cols());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MaxPool { input, argmax } => {
                    let n_in = self.nodes[*input].value.rows();
                    accumulate(&mut grads, *input, sparse_ops::max_pool_backward(&g, argmax, n_in));
                }
                Op::AvgPool { input, map, counts } => {
                    accumulate(&mut grads, *input, sparse_ops::pool_backward(&g, map, Some(counts)));
                }
                Op::SumPool { input, map } => {
                    accumulate(&mut grads, *input, sparse_ops::pool_backward(&g, map, None));
                }
                Op::Gather { input, rows } => {
                    let src = &self.nodes[*input].value;
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for (r, &s) in rows.iter().enumerate() {
                        for (dst, v) in gx.row_mut(s as usize).iter_mut().zip(g.row(r)) {
                            *dst += v;
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::Softmax { input } => {
                    accumulate(&mut grads, *input, sparse_ops::softmax_backward(&g, &node.value));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    ignore,
                    probs,
                    count,
                } => {
                    let scale = g.get(0, 0);
                    let mut gx = Matrix::zeros(probs.rows(), probs.cols());
                    if *count > 0 {
                        let k = scale / *count as f64;
                        for (r, &l) in labels.iter().enumerate() {
                            if l == *ignore {
                                continue;
                            }
                            for (c, dst) in gx.row_mut(r).iter_mut().enumerate() {
                                let onehot = if c == l as usize { 1.0 } else { 0.0 };
                                *dst = k * (probs.get(r, c) - onehot);
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, gx);
                }
                Op::NllOfProbs {
                    probs,
                    labels,
                    ignore,
                    count,
                } => {
                    let p = &self.nodes[*probs].value;
                    let mut gx = Matrix::zeros(p.rows(), p.cols());
                    if *count > 0 {
                        let k = g.get(0, 0) / *count as f64;
                        for (r, &l) in labels.iter().enumerate() {
                            if l == *ignore {
                                continue;
                            }
                            gx.set(r, l as usize, -k / p.get(r, l as usize).max(f64::MIN_POSITIVE));
                        }
                    }
                    accumulate(&mut grads, *probs, gx);
                }
                Op::Sum { input } => {
                    let v = &self.nodes[*input].value;
                    let s = g.get(0, 0);
                    accumulate(&mut grads, *input, Matrix::from_fn(v.rows(), v.cols(), |_, _| s));
                }
                Op::Dot { input, weights } => {
                    accumulate(&mut grads, *input, weights.scale(g.get(0, 0)));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}
