//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] owns an append-only arena of nodes; every operation evaluates
//! eagerly, records what it needs for the backward pass, and checks its
//! output for NaN/infinity so numerical blowups surface at the op that
//! produced them instead of three modules later. [`Var`] is a copyable
//! handle into the arena, valid for the lifetime of its graph.

use std::cell::RefCell;
use std::marker::PhantomData;

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use super::{NumResult, NumericsError};

/// Handle to a node in a [`Graph`]. Cheap to copy; tied to the graph's
/// lifetime so it cannot outlive the tape it points into.
#[derive(Clone, Copy, Debug)]
pub struct Var<'g, S: Scalar> {
    index: usize,
    _graph: PhantomData<&'g Graph<S>>,
}

/// How the right operand of an elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// Rhs is a vector matching the lhs's last axis.
    Vector,
    /// Rhs is rank-0.
    Scalar,
}

enum Op<S: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize },
    MatmulNT { a: usize, b: usize },
    Add { a: usize, b: usize, kind: Broadcast },
    Mul { a: usize, b: usize, kind: Broadcast },
    Relu { x: usize },
    Softmax { x: usize, axis: usize },
    /// Non-affine normalization over the last axis; `inv_std` has one entry
    /// per lane (all leading positions).
    LayerNorm { x: usize, inv_std: Vec<S> },
    /// Batch statistics over all leading positions, channel = last axis.
    BatchNorm { x: usize, inv_std: Vec<S> },
    Mean { x: usize, axis: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape { x: usize },
    /// Mean cross-entropy from logits; `probs` are the row softmaxes.
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor<S> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Append-only operation tape. All arithmetic runs eagerly at call time;
/// [`Graph::backward`] replays the tape in reverse to produce gradients.
pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Gradients of a scalar output with respect to every node, produced by
/// [`Graph::backward`]. Nodes the output does not depend on get exact zeros.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `v`; an all-zero tensor when the output did
    /// not depend on it.
    pub fn wrt(&self, v: Var<'_, S>) -> Tensor<S> {
        match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.index].clone()),
        }
    }
}

/// Splits a shape at `axis` into (outer, len, inner) block sizes for strided
/// lane iteration.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// out[i,j] += sum_l a[i,l] * b[l,j]
fn mm_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + a_il * b_row[j];
            }
        }
    }
}

/// out[i,j] += sum_l a[i,l] * b[j,l]
fn mm_nt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for l in 0..k {
                acc = acc + a_row[l] * b_row[l];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out[l,j] += sum_i a[i,l] * b[i,j] (a is [m,k], b is [m,n], out is [k,n])
fn mm_tn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a_row[l];
            let out_row = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + a_il * b_row[j];
            }
        }
    }
}

fn tensor_add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("add preserves volume")
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, add: Tensor<S>) {
    *slot = Some(match slot.take() {
        None => add,
        Some(cur) => tensor_add(&cur, &add),
    });
}

/// Sums `g` over all leading axes, leaving a vector over the last axis.
fn reduce_to_vector<S: Scalar>(g: &Tensor<S>, n: usize) -> Tensor<S> {
    let mut out = vec![S::zero(); n];
    for chunk in g.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk.iter()) {
            *o = *o + v;
        }
    }
    Tensor::new(vec![n], out).expect("reduction shape")
}

fn reduce_to_scalar<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let mut acc = S::zero();
    for &v in g.data() {
        acc = acc + v;
    }
    Tensor::scalar(acc)
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, v: Var<'_, S>) -> Tensor<S> {
        self.nodes.borrow()[v.index].value.clone()
    }

    pub fn shape(&self, v: Var<'_, S>) -> Vec<usize> {
        self.nodes.borrow()[v.index].value.shape().to_vec()
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool, name: &str) -> NumResult<Var<'_, S>> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: name.to_string() });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            index: nodes.len() - 1,
            _graph: PhantomData,
        })
    }

    fn needs_grad(&self, v: Var<'_, S>) -> bool {
        self.nodes.borrow()[v.index].needs_grad
    }

    /// Non-differentiable leaf (data, masks, frozen statistics).
    pub fn constant(&self, t: Tensor<S>) -> NumResult<Var<'_, S>> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Differentiable leaf; gradients are produced for it by `backward`.
    pub fn param(&self, t: Tensor<S>) -> NumResult<Var<'_, S>> {
        self.push(t, Op::Leaf, true, "param")
    }

    /// Rank-0 constant.
    pub fn lit(&self, v: S) -> NumResult<Var<'_, S>> {
        self.constant(Tensor::scalar(v))
    }

    /// Matrix product with optional leading batch axes on the left operand.
    /// `b` is either rank-2 (shared across all batches) or carries identical
    /// leading axes.
    pub fn matmul(&self, a: Var<'_, S>, b: Var<'_, S>) -> NumResult<Var<'_, S>> {
        let (av, bv) = (self.value(a), self.value(b));
        let rank = av.rank();
        if rank < 2 {
            return Err(NumericsError::InvalidShape {
                op: "matmul",
                shape: av.shape().to_vec(),
                detail: "left operand must have rank >= 2".into(),
            });
        }
        let m = av.shape()[rank - 2];
        let k = av.shape()[rank - 1];
        let batch: usize = av.shape()[..rank - 2].iter().product();
        let shared_b = bv.rank() == 2;
        let mismatch = || NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        let n = if shared_b {
            if bv.shape()[0] != k {
                return Err(mismatch());
            }
            bv.shape()[1]
        } else {
            if bv.rank() != rank
                || bv.shape()[..rank - 2] != av.shape()[..rank - 2]
                || bv.shape()[rank - 2] != k
            {
                return Err(mismatch());
            }
            bv.shape()[rank - 1]
        };
        let mut out = vec![S::zero(); batch * m * n];
        for t in 0..batch {
            let a_off = t * m * k;
            let b_off = if shared_b { 0 } else { t * k * n };
            mm_acc(
                &av.data()[a_off..a_off + m * k],
                &bv.data()[b_off..b_off + k * n],
                m,
                k,
                n,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let mut shape = av.shape()[..rank - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            Tensor::new(shape, out)?,
            Op::Matmul {
                a: a.index,
                b: b.index,
            },
            needs,
            "matmul",
        )
    }

    /// `a` times `b` transposed: contracts the last axis of both operands.
    /// Same batching rules as [`Graph::matmul`].
    pub fn matmul_nt(&self, a: Var<'_, S>, b: Var<'_, S>) -> NumResult<Var<'_, S>> {
        let (av, bv) = (self.value(a), self.value(b));
        let rank = av.rank();
        if rank < 2 {
            return Err(NumericsError::InvalidShape {
                op: "matmul_nt",
                shape: av.shape().to_vec(),
                detail: "left operand must have rank >= 2".into(),
            });
        }
        let m = av.shape()[rank - 2];
        let k = av.shape()[rank - 1];
        let batch: usize = av.shape()[..rank - 2].iter().product();
        let shared_b = bv.rank() == 2;
        let mismatch = || NumericsError::ShapeMismatch {
            op: "matmul_nt",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        let n = if shared_b {
            if bv.shape()[1] != k {
                return Err(mismatch());
            }
            bv.shape()[0]
        } else {
            if bv.rank() != rank
                || bv.shape()[..rank - 2] != av.shape()[..rank - 2]
                || bv.shape()[rank - 1] != k
            {
                return Err(mismatch());
            }
            bv.shape()[rank - 2]
        };
        let mut out = vec![S::zero(); batch * m * n];
        for t in 0..batch {
            let a_off = t * m * k;
            let b_off = if shared_b { 0 } else { t * n * k };
            mm_nt_acc(
                &av.data()[a_off..a_off + m * k],
                &bv.data()[b_off..b_off + n * k],
                m,
                k,
                n,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let mut shape = av.shape()[..rank - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            Tensor::new(shape, out)?,
            Op::MatmulNT {
                a: a.index,
                b: b.index,
            },
            needs,
            "matmul_nt",
        )
    }

    /// Pointwise (1x1) convolution over the channel axis: a matrix product
    /// of the last axis against a rank-2 weight.
    pub fn conv1x1(&self, x: Var<'_, S>, w: Var<'_, S>) -> NumResult<Var<'_, S>> {
        self.matmul(x, w)
    }

    fn broadcast_kind(
        op: &'static str,
        lhs: &Tensor<S>,
        rhs: &Tensor<S>,
    ) -> NumResult<Broadcast> {
        if lhs.shape() == rhs.shape() {
            Ok(Broadcast::Same)
        } else if rhs.rank() == 0 {
            Ok(Broadcast::Scalar)
        } else if rhs.rank() == 1
            && lhs.rank() >= 1
            && lhs.shape()[lhs.rank() - 1] == rhs.shape()[0]
        {
            Ok(Broadcast::Vector)
        } else {
            Err(NumericsError::ShapeMismatch {
                op,
                lhs: lhs.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            })
        }
    }

    /// Elementwise sum. The right operand may also be a vector matching the
    /// last axis or a rank-0 scalar.
    pub fn add(&self, a: Var<'_, S>, b: Var<'_, S>) -> NumResult<Var<'_, S>> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = Self::broadcast_kind("add", &av, &bv)?;
        let data = match kind {
            Broadcast::Same => av
                .data()
                .iter()
                .zip(bv.data().iter())
                .map(|(&x, &y)| x + y)
                .collect::<Vec<_>>(),
            Broadcast::Vector => {
                let n = bv.len();
                av.data()
                    .chunks(n)
                    .flat_map(|chunk| {
                        chunk
                            .iter()
                            .zip(bv.data().iter())
                            .map(|(&x, &y)| x + y)
                            .collect::<Vec<_>>()
                    })
                    .collect()
            }
            Broadcast::Scalar => {
                let s = bv.data()[0];
                av.data().iter().map(|&x| x + s).collect()
            }
        };
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::Add {
                a: a.index,
                b: b.index,
                kind,
            },
            needs,
            "add",
        )
    }

    /// Elementwise product, with the same broadcast rules as [`Graph::add`].
    pub fn mul(&self, a: Var<'_, S>, b: Var<'_, S>) -> NumResult<Var<'_, S>> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = Self::broadcast_kind("mul", &av, &bv)?;
        let data = match kind {
            Broadcast::Same => av
                .data()
                .iter()
                .zip(bv.data().iter())
                .map(|(&x, &y)| x * y)
                .collect::<Vec<_>>(),
            Broadcast::Vector => {
                let n = bv.len();
                av.data()
                    .chunks(n)
                    .flat_map(|chunk| {
                        chunk
                            .iter()
                            .zip(bv.data().iter())
                            .map(|(&x, &y)| x * y)
                            .collect::<Vec<_>>()
                    })
                    .collect()
            }
            Broadcast::Scalar => {
                let s = bv.data()[0];
                av.data().iter().map(|&x| x * s).collect()
            }
        };
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::Mul {
                a: a.index,
                b: b.index,
                kind,
            },
            needs,
            "mul",
        )
    }

    /// Rectified linear unit.
    pub fn relu(&self, x: Var<'_, S>) -> NumResult<Var<'_, S>> {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let needs = self.needs_grad(x);
        self.push(
            Tensor::new(xv.shape().to_vec(), data)?,
            Op::Relu { x: x.index },
            needs,
            "relu",
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, x: Var<'_, S>, axis: usize) -> NumResult<Var<'_, S>> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(NumericsError::InvalidAxis {
                op: "softmax",
                axis,
                rank: xv.rank(),
            });
        }
        let (outer, len, inner) = axis_blocks(xv.shape(), axis);
        if len == 0 {
            return Err(NumericsError::InvalidShape {
                op: "softmax",
                shape: xv.shape().to_vec(),
                detail: "softmax axis is empty".into(),
            });
        }
        let src = xv.data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let base = o * len * inner + r;
                let mut max = src[base];
                for i in 1..len {
                    let v = src[base + i * inner];
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = S::zero();
                for i in 0..len {
                    let e = (src[base + i * inner] - max).exp();
                    out[base + i * inner] = e;
                    sum = sum + e;
                }
                for i in 0..len {
                    out[base + i * inner] = out[base + i * inner] / sum;
                }
            }
        }
        let needs = self.needs_grad(x);
        self.push(
            Tensor::new(xv.shape().to_vec(), out)?,
            Op::Softmax {
                x: x.index,
                axis,
            },
            needs,
            "softmax",
        )
    }

    /// Normalizes over the last axis to zero mean and unit variance
    /// (population variance, plus `eps` inside the square root). Affine
    /// scale/shift, when wanted, is composed from `mul` and `add`.
    pub fn layer_norm(&self, x: Var<'_, S>, eps: f64) -> NumResult<Var<'_, S>> {
        let xv = self.value(x);
        if xv.rank() == 0 || xv.shape()[xv.rank() - 1] == 0 {
            return Err(NumericsError::InvalidShape {
                op: "layer_norm",
                shape: xv.shape().to_vec(),
                detail: "needs a non-empty last axis".into(),
            });
        }
        let n = xv.shape()[xv.rank() - 1];
        let lanes = xv.len() / n;
        let eps = S::from_f64(eps);
        let inv_n = S::from_f64(1.0 / n as f64);
        let src = xv.data();
        let mut out = vec![S::zero(); src.len()];
        let mut inv_std = vec![S::zero(); lanes];
        for lane in 0..lanes {
            let row = &src[lane * n..(lane + 1) * n];
            let mut mean = S::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let s = (var + eps).sqrt().recip();
            inv_std[lane] = s;
            for (i, &v) in row.iter().enumerate() {
                out[lane * n + i] = (v - mean) * s;
            }
        }
        let needs = self.needs_grad(x);
        self.push(
            Tensor::new(xv.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: x.index,
                inv_std,
            },
            needs,
            "layer_norm",
        )
    }

    /// Layer normalization followed by a learned per-feature scale and
    /// shift; `gamma` and `beta` are vectors over the last axis.
    pub fn layer_norm_affine(
        &self,
        x: Var<'_, S>,
        gamma: Var<'_, S>,
        beta: Var<'_, S>,
        eps: f64,
    ) -> NumResult<Var<'_, S>> {
        let normed = self.layer_norm(x, eps)?;
        let scaled = self.mul(normed, gamma)?;
        self.add(scaled, beta)
    }

    /// Training-mode batch normalization: channel is the last axis and the
    /// batch statistics run over every leading position. Returns the
    /// normalized tensor plus the batch mean and (population) variance per
    /// channel, which the caller folds into its running statistics.
    pub fn batch_norm_train(
        &self,
        x: Var<'_, S>,
        eps: f64,
    ) -> NumResult<(Var<'_, S>, Tensor<S>, Tensor<S>)> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(NumericsError::InvalidShape {
                op: "batch_norm",
                shape: xv.shape().to_vec(),
                detail: "needs at least one leading axis over which to take statistics".into(),
            });
        }
        let c = xv.shape()[xv.rank() - 1];
        if c == 0 {
            return Err(NumericsError::InvalidShape {
                op: "batch_norm",
                shape: xv.shape().to_vec(),
                detail: "channel axis is empty".into(),
            });
        }
        let m = xv.len() / c;
        let eps = S::from_f64(eps);
        let inv_m = S::from_f64(1.0 / m as f64);
        let src = xv.data();
        let mut mean = vec![S::zero(); c];
        for pos in 0..m {
            for ch in 0..c {
                mean[ch] = mean[ch] + src[pos * c + ch];
            }
        }
        for v in mean.iter_mut() {
            *v = *v * inv_m;
        }
        let mut var = vec![S::zero(); c];
        for pos in 0..m {
            for ch in 0..c {
                let d = src[pos * c + ch] - mean[ch];
                var[ch] = var[ch] + d * d;
            }
        }
        for v in var.iter_mut() {
            *v = *v * inv_m;
        }
        let inv_std: Vec<S> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut out = vec![S::zero(); src.len()];
        for pos in 0..m {
            for ch in 0..c {
                out[pos * c + ch] = (src[pos * c + ch] - mean[ch]) * inv_std[ch];
            }
        }
        let needs = self.needs_grad(x);
        let y = self.push(
            Tensor::new(xv.shape().to_vec(), out)?,
            Op::BatchNorm {
                x: x.index,
                inv_std,
            },
            needs,
            "batch_norm",
        )?;
        Ok((
            y,
            Tensor::new(vec![c], mean)?,
            Tensor::new(vec![c], var)?,
        ))
    }

    /// Inference-mode batch normalization against frozen running statistics.
    /// Composed from broadcast `add`/`mul` with constant leaves, so no
    /// dedicated backward rule is needed.
    pub fn batch_norm_eval(
        &self,
        x: Var<'_, S>,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        eps: f64,
    ) -> NumResult<Var<'_, S>> {
        let xv = self.value(x);
        if xv.rank() < 1 {
            return Err(NumericsError::InvalidShape {
                op: "batch_norm",
                shape: xv.shape().to_vec(),
                detail: "needs a channel axis".into(),
            });
        }
        let c = xv.shape()[xv.rank() - 1];
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(NumericsError::ShapeMismatch {
                op: "batch_norm",
                lhs: xv.shape().to_vec(),
                rhs: running_mean.shape().to_vec(),
            });
        }
        let eps = S::from_f64(eps);
        let neg_mean: Vec<S> = running_mean.data().iter().map(|&v| -v).collect();
        let inv_std: Vec<S> = running_var
            .data()
            .iter()
            .map(|&v| (v + eps).sqrt().recip())
            .collect();
        let shifted = self.add(x, self.constant(Tensor::new(vec![c], neg_mean)?)?)?;
        self.mul(shifted, self.constant(Tensor::new(vec![c], inv_std)?)?)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean(&self, x: Var<'_, S>, axis: usize) -> NumResult<Var<'_, S>> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(NumericsError::InvalidAxis {
                op: "mean",
                axis,
                rank: xv.rank(),
            });
        }
        let (outer, len, inner) = axis_blocks(xv.shape(), axis);
        if len == 0 {
            return Err(NumericsError::InvalidShape {
                op: "mean",
                shape: xv.shape().to_vec(),
                detail: "mean over an empty axis".into(),
            });
        }
        let inv_len = S::from_f64(1.0 / len as f64);
        let src = xv.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let mut acc = S::zero();
                for i in 0..len {
                    acc = acc + src[(o * len + i) * inner + r];
                }
                out[o * inner + r] = acc * inv_len;
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let needs = self.needs_grad(x);
        self.push(
            Tensor::new(shape, out)?,
            Op::Mean { x: x.index, axis },
            needs,
            "mean",
        )
    }

    /// Concatenates along `axis`; every other axis must agree.
    pub fn concat(&self, xs: &[Var<'_, S>], axis: usize) -> NumResult<Var<'_, S>> {
        if xs.is_empty() {
            return Err(NumericsError::InvalidShape {
                op: "concat",
                shape: vec![],
                detail: "no operands".into(),
            });
        }
        let values: Vec<Tensor<S>> = xs.iter().map(|&v| self.value(v)).collect();
        let rank = values[0].rank();
        if axis >= rank {
            return Err(NumericsError::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        for v in &values[1..] {
            let compatible = v.rank() == rank
                && v.shape()
                    .iter()
                    .zip(values[0].shape().iter())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_blocks(values[0].shape(), axis);
        let total_len: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut out = vec![S::zero(); outer * total_len * inner];
        for o in 0..outer {
            let mut dst = o * total_len * inner;
            for v in &values {
                let len = v.shape()[axis];
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&v.data()[src..src + len * inner]);
                dst += len * inner;
            }
        }
        let mut shape = values[0].shape().to_vec();
        shape[axis] = total_len;
        let needs = xs.iter().any(|&v| self.needs_grad(v));
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.iter().map(|v| v.index).collect(),
                axis,
            },
            needs,
            "concat",
        )
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(
        &self,
        x: Var<'_, S>,
        axis: usize,
        start: usize,
        len: usize,
    ) -> NumResult<Var<'_, S>> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(NumericsError::InvalidAxis {
                op: "slice",
                axis,
                rank: xv.rank(),
            });
        }
        let dim = xv.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(NumericsError::InvalidShape {
                op: "slice",
                shape: xv.shape().to_vec(),
                detail: format!("range {start}..{} exceeds axis of size {dim}", start + len),
            });
        }
        let (outer, _, inner) = axis_blocks(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let from = (o * dim + start) * inner;
            let to = o * len * inner;
            out[to..to + len * inner].copy_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let needs = self.needs_grad(x);
        self.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                x: x.index,
                axis,
                start,
            },
            needs,
            "slice",
        )
    }

    /// Same elements under a new shape of equal volume.
    pub fn reshape(&self, x: Var<'_, S>, shape: Vec<usize>) -> NumResult<Var<'_, S>> {
        let xv = self.value(x);
        let reshaped = xv.reshape(shape)?;
        let needs = self.needs_grad(x);
        self.push(reshaped, Op::Reshape { x: x.index }, needs, "reshape")
    }

    /// Inverted dropout with an explicit 0/1 keep mask: kept entries are
    /// scaled by `1/(1-p)` so the expected value is unchanged. Taking the
    /// mask as an argument keeps the op a fixed function of its input, which
    /// is what finite differencing needs.
    pub fn dropout_with_mask(
        &self,
        x: Var<'_, S>,
        mask: &Tensor<S>,
        p: f64,
    ) -> NumResult<Var<'_, S>> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidArgument {
                op: "dropout",
                detail: format!("rate {p} outside [0, 1)"),
            });
        }
        let xv = self.value(x);
        if mask.shape() != xv.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "dropout",
                lhs: xv.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let scale = S::from_f64(1.0 / (1.0 - p));
        let scaled: Vec<S> = mask.data().iter().map(|&m| m * scale).collect();
        let gate = self.constant(Tensor::new(mask.shape().to_vec(), scaled)?)?;
        self.mul(x, gate)
    }

    /// Inverted dropout with a freshly drawn keep mask. `p == 0` is the
    /// identity and records nothing.
    pub fn dropout<'g, R: Rng + ?Sized>(
        &'g self,
        x: Var<'g, S>,
        p: f64,
        rng: &mut R,
    ) -> NumResult<Var<'g, S>> {
        if p == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x);
        let volume: usize = shape.iter().product();
        let mask: Vec<S> = (0..volume)
            .map(|_| {
                if rng.random::<f64>() < 1.0 - p {
                    S::one()
                } else {
                    S::zero()
                }
            })
            .collect();
        self.dropout_with_mask(x, &Tensor::new(shape, mask)?, p)
    }

    /// Mean categorical cross-entropy of logits against integer labels.
    /// Accepts a single logit vector with one label or a `[batch, classes]`
    /// matrix with one label per row; returns a rank-0 tensor.
    pub fn cross_entropy_from_logits(
        &self,
        logits: Var<'_, S>,
        labels: &[usize],
    ) -> NumResult<Var<'_, S>> {
        let lv = self.value(logits);
        let (batch, classes) = match lv.rank() {
            1 => (1, lv.shape()[0]),
            2 => (lv.shape()[0], lv.shape()[1]),
            _ => {
                return Err(NumericsError::InvalidShape {
                    op: "cross_entropy",
                    shape: lv.shape().to_vec(),
                    detail: "expected rank 1 or 2 logits".into(),
                })
            }
        };
        if classes == 0 || batch == 0 {
            return Err(NumericsError::InvalidShape {
                op: "cross_entropy",
                shape: lv.shape().to_vec(),
                detail: "empty logits".into(),
            });
        }
        if labels.len() != batch {
            return Err(NumericsError::InvalidShape {
                op: "cross_entropy",
                shape: lv.shape().to_vec(),
                detail: format!("{} labels for a batch of {batch}", labels.len()),
            });
        }
        let src = lv.data();
        let mut probs = vec![S::zero(); src.len()];
        let mut loss = S::zero();
        for (b, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(NumericsError::LabelOutOfRange { label, classes });
            }
            let row = &src[b * classes..(b + 1) * classes];
            let mut max = row[0];
            for &v in &row[1..] {
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for (k, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[b * classes + k] = e;
                sum = sum + e;
            }
            for k in 0..classes {
                probs[b * classes + k] = probs[b * classes + k] / sum;
            }
            // -log p[label] in the stable form lse - logit[label]
            loss = loss + max + sum.ln() - row[label];
        }
        loss = loss / S::from_f64(batch as f64);
        let needs = self.needs_grad(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.index,
                labels: labels.to_vec(),
                probs: Tensor::new(lv.shape().to_vec(), probs)?,
            },
            needs,
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar output. Every recorded node gets at most
    /// one visit; parameters the output does not depend on read back as
    /// exact zeros from the returned [`Gradients`].
    pub fn backward(&self, output: Var<'_, S>) -> NumResult<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.index];
        if out_node.value.len() != 1 {
            return Err(NumericsError::NonScalarOutput {
                shape: out_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.index] = Some(Tensor::full(out_node.value.shape().to_vec(), S::one()));

        for i in (0..=output.index).rev() {
            if grads[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].clone().expect("checked above");
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let rank = av.rank();
                    let m = av.shape()[rank - 2];
                    let k = av.shape()[rank - 1];
                    let batch: usize = av.shape()[..rank - 2].iter().product();
                    let shared_b = bv.rank() == 2;
                    let n = if shared_b {
                        bv.shape()[1]
                    } else {
                        bv.shape()[rank - 1]
                    };
                    if nodes[a].needs_grad {
                        let mut da = vec![S::zero(); av.len()];
                        for t in 0..batch {
                            let b_off = if shared_b { 0 } else { t * k * n };
                            mm_nt_acc(
                                &g.data()[t * m * n..(t + 1) * m * n],
                                &bv.data()[b_off..b_off + k * n],
                                m,
                                n,
                                k,
                                &mut da[t * m * k..(t + 1) * m * k],
                            );
                        }
                        accumulate(&mut grads[a], Tensor::new(av.shape().to_vec(), da)?);
                    }
                    if nodes[b].needs_grad {
                        let mut db = vec![S::zero(); bv.len()];
                        for t in 0..batch {
                            let b_off = if shared_b { 0 } else { t * k * n };
                            mm_tn_acc(
                                &av.data()[t * m * k..(t + 1) * m * k],
                                &g.data()[t * m * n..(t + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut db[b_off..b_off + k * n],
                            );
                        }
                        accumulate(&mut grads[b], Tensor::new(bv.shape().to_vec(), db)?);
                    }
                }
                Op::MatmulNT { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let rank = av.rank();
                    let m = av.shape()[rank - 2];
                    let k = av.shape()[rank - 1];
                    let batch: usize = av.shape()[..rank - 2].iter().product();
                    let shared_b = bv.rank() == 2;
                    let n = if shared_b {
                        bv.shape()[0]
                    } else {
                        bv.shape()[rank - 2]
                    };
                    if nodes[a].needs_grad {
                        // dA = dC * B
                        let mut da = vec![S::zero(); av.len()];
                        for t in 0..batch {
                            let b_off = if shared_b { 0 } else { t * n * k };
                            mm_acc(
                                &g.data()[t * m * n..(t + 1) * m * n],
                                &bv.data()[b_off..b_off + n * k],
                                m,
                                n,
                                k,
                                &mut da[t * m * k..(t + 1) * m * k],
                            );
                        }
                        accumulate(&mut grads[a], Tensor::new(av.shape().to_vec(), da)?);
                    }
                    if nodes[b].needs_grad {
                        // dB = dC^T * A
                        let mut db = vec![S::zero(); bv.len()];
                        for t in 0..batch {
                            let b_off = if shared_b { 0 } else { t * n * k };
                            mm_tn_acc(
                                &g.data()[t * m * n..(t + 1) * m * n],
                                &av.data()[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                                &mut db[b_off..b_off + n * k],
                            );
                        }
                        accumulate(&mut grads[b], Tensor::new(bv.shape().to_vec(), db)?);
                    }
                }
                Op::Add { a, b, kind } => {
                    let (a, b, kind) = (*a, *b, *kind);
                    if nodes[a].needs_grad {
                        accumulate(&mut grads[a], g.clone());
                    }
                    if nodes[b].needs_grad {
                        let db = match kind {
                            Broadcast::Same => g.clone(),
                            Broadcast::Vector => reduce_to_vector(&g, nodes[b].value.len()),
                            Broadcast::Scalar => reduce_to_scalar(&g),
                        };
                        accumulate(&mut grads[b], db);
                    }
                }
                Op::Mul { a, b, kind } => {
                    let (a, b, kind) = (*a, *b, *kind);
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    if nodes[a].needs_grad {
                        let da = match kind {
                            Broadcast::Same => {
                                let data = g
                                    .data()
                                    .iter()
                                    .zip(bv.data().iter())
                                    .map(|(&gv, &b)| gv * b)
                                    .collect();
                                Tensor::new(av.shape().to_vec(), data)?
                            }
                            Broadcast::Vector => {
                                let n = bv.len();
                                let data = g
                                    .data()
                                    .iter()
                                    .enumerate()
                                    .map(|(idx, &gv)| gv * bv.data()[idx % n])
                                    .collect();
                                Tensor::new(av.shape().to_vec(), data)?
                            }
                            Broadcast::Scalar => {
                                let s = bv.data()[0];
                                let data = g.data().iter().map(|&gv| gv * s).collect();
                                Tensor::new(av.shape().to_vec(), data)?
                            }
                        };
                        accumulate(&mut grads[a], da);
                    }
                    if nodes[b].needs_grad {
                        let prod: Vec<S> = g
                            .data()
                            .iter()
                            .zip(av.data().iter())
                            .map(|(&gv, &a)| gv * a)
                            .collect();
                        let prod = Tensor::new(av.shape().to_vec(), prod)?;
                        let db = match kind {
                            Broadcast::Same => prod,
                            Broadcast::Vector => reduce_to_vector(&prod, bv.len()),
                            Broadcast::Scalar => reduce_to_scalar(&prod),
                        };
                        accumulate(&mut grads[b], db);
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    if nodes[x].needs_grad {
                        let xv = &nodes[x].value;
                        let data = g
                            .data()
                            .iter()
                            .zip(xv.data().iter())
                            .map(|(&gv, &x)| if x > S::zero() { gv } else { S::zero() })
                            .collect();
                        accumulate(&mut grads[x], Tensor::new(xv.shape().to_vec(), data)?);
                    }
                }
                Op::Softmax { x, axis } => {
                    let (x, axis) = (*x, *axis);
                    if nodes[x].needs_grad {
                        let y = &nodes[i].value;
                        let (outer, len, inner) = axis_blocks(y.shape(), axis);
                        let mut dx = vec![S::zero(); y.len()];
                        for o in 0..outer {
                            for r in 0..inner {
                                let base = o * len * inner + r;
                                let mut dot = S::zero();
                                for idx in 0..len {
                                    let at = base + idx * inner;
                                    dot = dot + g.data()[at] * y.data()[at];
                                }
                                for idx in 0..len {
                                    let at = base + idx * inner;
                                    dx[at] = y.data()[at] * (g.data()[at] - dot);
                                }
                            }
                        }
                        accumulate(&mut grads[x], Tensor::new(y.shape().to_vec(), dx)?);
                    }
                }
                Op::LayerNorm { x, inv_std } => {
                    let x = *x;
                    if nodes[x].needs_grad {
                        let y = &nodes[i].value;
                        let n = y.shape()[y.rank() - 1];
                        let inv_n = S::from_f64(1.0 / n as f64);
                        let mut dx = vec![S::zero(); y.len()];
                        for lane in 0..inv_std.len() {
                            let off = lane * n;
                            let mut g_mean = S::zero();
                            let mut gy_mean = S::zero();
                            for idx in 0..n {
                                g_mean = g_mean + g.data()[off + idx];
                                gy_mean = gy_mean + g.data()[off + idx] * y.data()[off + idx];
                            }
                            g_mean = g_mean * inv_n;
                            gy_mean = gy_mean * inv_n;
                            let s = inv_std[lane];
                            for idx in 0..n {
                                dx[off + idx] = s
                                    * (g.data()[off + idx]
                                        - g_mean
                                        - y.data()[off + idx] * gy_mean);
                            }
                        }
                        accumulate(&mut grads[x], Tensor::new(y.shape().to_vec(), dx)?);
                    }
                }
                Op::BatchNorm { x, inv_std } => {
                    let x = *x;
                    if nodes[x].needs_grad {
                        let y = &nodes[i].value;
                        let c = inv_std.len();
                        let m = y.len() / c;
                        let inv_m = S::from_f64(1.0 / m as f64);
                        let mut g_mean = vec![S::zero(); c];
                        let mut gy_mean = vec![S::zero(); c];
                        for pos in 0..m {
                            for ch in 0..c {
                                let at = pos * c + ch;
                                g_mean[ch] = g_mean[ch] + g.data()[at];
                                gy_mean[ch] = gy_mean[ch] + g.data()[at] * y.data()[at];
                            }
                        }
                        for ch in 0..c {
                            g_mean[ch] = g_mean[ch] * inv_m;
                            gy_mean[ch] = gy_mean[ch] * inv_m;
                        }
                        let mut dx = vec![S::zero(); y.len()];
                        for pos in 0..m {
                            for ch in 0..c {
                                let at = pos * c + ch;
                                dx[at] = inv_std[ch]
                                    * (g.data()[at] - g_mean[ch] - y.data()[at] * gy_mean[ch]);
                            }
                        }
                        accumulate(&mut grads[x], Tensor::new(y.shape().to_vec(), dx)?);
                    }
                }
                Op::Mean { x, axis } => {
                    let (x, axis) = (*x, *axis);
                    if nodes[x].needs_grad {
                        let xv = &nodes[x].value;
                        let (outer, len, inner) = axis_blocks(xv.shape(), axis);
                        let inv_len = S::from_f64(1.0 / len as f64);
                        let mut dx = vec![S::zero(); xv.len()];
                        for o in 0..outer {
                            for r in 0..inner {
                                let gv = g.data()[o * inner + r] * inv_len;
                                for idx in 0..len {
                                    dx[(o * len + idx) * inner + r] = gv;
                                }
                            }
                        }
                        accumulate(&mut grads[x], Tensor::new(xv.shape().to_vec(), dx)?);
                    }
                }
                Op::Concat { xs, axis } => {
                    let (xs, axis) = (xs.clone(), *axis);
                    let (outer, total_len, inner) = axis_blocks(nodes[i].value.shape(), axis);
                    let mut start = 0usize;
                    for &xi in &xs {
                        let len = nodes[xi].value.shape()[axis];
                        if nodes[xi].needs_grad {
                            let mut dx = vec![S::zero(); nodes[xi].value.len()];
                            for o in 0..outer {
                                let from = (o * total_len + start) * inner;
                                let to = o * len * inner;
                                dx[to..to + len * inner]
                                    .copy_from_slice(&g.data()[from..from + len * inner]);
                            }
                            accumulate(
                                &mut grads[xi],
                                Tensor::new(nodes[xi].value.shape().to_vec(), dx)?,
                            );
                        }
                        start += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (x, axis, start) = (*x, *axis, *start);
                    if nodes[x].needs_grad {
                        let xv = &nodes[x].value;
                        let (outer, dim, inner) = axis_blocks(xv.shape(), axis);
                        let len = nodes[i].value.shape()[axis];
                        let mut dx = vec![S::zero(); xv.len()];
                        for o in 0..outer {
                            let to = (o * dim + start) * inner;
                            let from = o * len * inner;
                            dx[to..to + len * inner]
                                .copy_from_slice(&g.data()[from..from + len * inner]);
                        }
                        accumulate(&mut grads[x], Tensor::new(xv.shape().to_vec(), dx)?);
                    }
                }
                Op::Reshape { x } => {
                    let x = *x;
                    if nodes[x].needs_grad {
                        let dx = g.reshape(nodes[x].value.shape().to_vec())?;
                        accumulate(&mut grads[x], dx);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    if nodes[logits].needs_grad {
                        let scale = g.data()[0] / S::from_f64(labels.len() as f64);
                        let classes = probs.shape()[probs.rank() - 1];
                        let mut dx: Vec<S> =
                            probs.data().iter().map(|&p| p * scale).collect();
                        for (b, &label) in labels.iter().enumerate() {
                            dx[b * classes + label] = dx[b * classes + label] - scale;
                        }
                        accumulate(
                            &mut grads[logits],
                            Tensor::new(probs.shape().to_vec(), dx)?,
                        );
                    }
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}
