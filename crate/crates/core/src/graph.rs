//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so a single reverse sweep over the tape visits each
//! node after all of its consumers. One graph is built per forward pass and
//! dropped after [`Graph::backward`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        b_t: bool,
    },
    Transpose(Var),
    Gelu(Var),
    Map {
        x: Var,
        deriv: Vec<T>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        seq: usize,
        probs: Vec<T>,
    },
    MeanPool {
        x: Var,
        group: usize,
    },
    Interleave(Vec<Var>),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    attention_log: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.grads.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }

    /// Builds gradients directly; used by tests and custom training loops.
    pub fn from_tensors(grads: Vec<Tensor<T>>) -> Self {
        Self { grads }
    }
}

pub(crate) fn softmax_rows_in_place<T: Scalar>(data: &mut [T], width: usize) {
    if width == 0 {
        return;
    }
    for row in data.chunks_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        let inv = T::one() / total;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_deriv_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Row-wise layer normalisation over the last dimension.
/// Returns `(output, xhat, inv_std)`.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gamma.len();
    let rows = x.len().checked_div(d).unwrap_or(0);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let dn = T::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (out, xhat, inv_std)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            attention_log: None,
        }
    }

    /// Keeps a copy of every attention probability tensor computed from now on.
    pub fn record_attention(&mut self) {
        self.attention_log = Some(Vec::new());
    }

    /// Attention maps recorded so far, each shaped `(batch, heads, seq, seq)`.
    pub fn attention_maps(&self) -> &[Tensor<T>] {
        self.attention_log.as_deref().unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A trainable leaf bound to `store`. Repeated calls return the same node.
    ///
    /// A graph binds parameters of a single store; gradients are reported
    /// against that store in [`Graph::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        let id = store.expect_id(name);
        self.param(store, id)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Adds vector `row` (length = last dim of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        let d = *va.shape().last().unwrap_or(&1);
        if vr.len() != d {
            return Err(Error::shape("add_row", &[d], vr.shape()));
        }
        let r = vr.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % d])
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(Error::shape("matmul operands must be 2-d", va.shape(), vb.shape()));
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (kb, n) = if b_t {
            (vb.shape()[1], vb.shape()[0])
        } else {
            (vb.shape()[0], vb.shape()[1])
        };
        if k != kb {
            return Err(Error::shape("matmul inner dimension", &[k], &[kb]));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, va.data(), false, vb.data(), b_t, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul { a, b, b_t }, ng))
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m×k) · bᵀ` with `b` stored as `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape("transpose expects 2-d", &[0, 0], va.shape()));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let src = va.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    /// `x · w + b` for `x (n×in)`, `w (in×out)`, `b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T) -> Var {
        let vx = self.value(x);
        let value = vx.map(f);
        let deriv = vx.data().iter().map(|&v| df(v)).collect();
        let ng = self.ng(x);
        self.push(value, Op::Map { x, deriv }, ng)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap_or(&1);
        if d == 0 {
            return Err(Error::shape("softmax over empty axis", &[1], &[0]));
        }
        let mut value = vx.clone();
        softmax_rows_in_place(value.data_mut(), d);
        let ng = self.ng(x);
        Ok(self.push(value, Op::Softmax(x), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *vx.shape().last().unwrap_or(&1);
        if d == 0 {
            return Err(Error::shape("layer_norm over empty row", &[1], &[0]));
        }
        if vg.len() != d || vb.len() != d {
            return Err(Error::shape("layer_norm affine", &[d], vg.shape()));
        }
        let (out, xhat, inv_std) = layer_norm_forward(vx.data(), vg.data(), vb.data(), eps);
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Scaled dot-product attention over independent sequences.
    ///
    /// `q`, `k`, `v` are `(batch·seq) × d_model` with each sequence's tokens in
    /// consecutive rows. Heads split `d_model` into contiguous `d_model/heads`
    /// slices. `bias`, if given, is `(1 | heads) × seq × seq` and is added to
    /// the scaled logits before the softmax. Output is the concatenation of
    /// the heads, `(batch·seq) × d_model`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        bias: Option<Var>,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() || vq.rank() != 2 {
            return Err(Error::shape("attention q/k/v", vq.shape(), vk.shape()));
        }
        let (rows, d) = (vq.shape()[0], vq.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} attention heads"
            )));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::shape("attention rows vs sequence length", &[seq], &[rows]));
        }
        let bias_heads = match bias {
            Some(b) => {
                let s = self.value(b).shape();
                if s.len() != 3 || s[1] != seq || s[2] != seq || (s[0] != 1 && s[0] != heads) {
                    return Err(Error::shape("attention bias", &[heads, seq, seq], s));
                }
                s[0]
            }
            None => 0,
        };
        let dh = d / heads;
        let batch = rows / seq;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let bd = bias.map(|b| self.value(b).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[((b * heads + h) * seq) * seq..((b * heads + h + 1) * seq) * seq];
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    for j in 0..seq {
                        let kj = &kd[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                        let mut s = T::zero();
                        for t in 0..dh {
                            s += qi[t] * kj[t];
                        }
                        s *= scale;
                        if let Some(bd) = bd {
                            let bh = if bias_heads == 1 { 0 } else { h };
                            s += bd[(bh * seq + i) * seq + j];
                        }
                        p[i * seq + j] = s;
                    }
                }
                softmax_rows_in_place(p, seq);
                for i in 0..seq {
                    let o = &mut out[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    for j in 0..seq {
                        let w = p[i * seq + j];
                        let vj = &vd[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                        for t in 0..dh {
                            o[t] += w * vj[t];
                        }
                    }
                }
            }
        }
        if let Some(log) = self.attention_log.as_mut() {
            log.push(Tensor::new(vec![batch, heads, seq, seq], probs.clone())?);
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                seq,
                probs,
            },
            ng,
        ))
    }

    /// Averages each group of `group` consecutive rows.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let vx = self.value(x);
        let rows = vx.rows();
        if group == 0 || !rows.is_multiple_of(group) {
            return Err(Error::shape("mean_pool group", &[group], &[rows]));
        }
        let d = vx.cols();
        let n = rows / group;
        let inv = T::one() / T::lit(group as f64);
        let mut out = vec![T::zero(); n * d];
        for b in 0..n {
            for s in 0..group {
                let src = vx.row(b * group + s);
                for j in 0..d {
                    out[b * d + j] += src[j];
                }
            }
            for o in &mut out[b * d..(b + 1) * d] {
                *o *= inv;
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::MeanPool { x, group }, ng))
    }

    /// Interleaves `n×d` matrices into an `(n·k)×d` matrix whose row `b·k + s`
    /// is row `b` of input `s`.
    pub fn interleave(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Config("interleave needs at least one input".into()))?;
        let shape = self.value(first).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("interleave expects 2-d", &[0, 0], &shape));
        }
        for &v in inputs {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::shape("interleave", &shape, self.value(v).shape()));
            }
        }
        let (n, d, k) = (shape[0], shape[1], inputs.len());
        let mut out = Vec::with_capacity(n * k * d);
        for b in 0..n {
            for &v in inputs {
                out.extend_from_slice(self.value(v).row(b));
            }
        }
        let value = Tensor::new(vec![n * k, d], out)?;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(value, Op::Interleave(inputs.to_vec()), ng))
    }

    /// Scales each row to unit Euclidean norm; rows with norm below `eps` are divided by `eps`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let vx = self.value(x);
        let d = vx.cols();
        let mut value = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        if d > 0 {
            for row in value.data_mut().chunks_mut(d) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                norms.push(n);
                let denom = n.max(eps);
                for v in row.iter_mut() {
                    *v = *v / denom;
                }
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::L2Normalize { x, norms, eps }, ng)
    }

    /// Weighted mean of per-row cross-entropy: `Σ wᵢ·(−log softmax(rowᵢ)[yᵢ]) / Σ wᵢ`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[T]>,
    ) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 {
            return Err(Error::shape("cross-entropy logits must be 2-d", &[0, 0], vl.shape()));
        }
        let (n, c) = (vl.shape()[0], vl.shape()[1]);
        if targets.len() != n {
            return Err(Error::shape("cross-entropy targets", &[n], &[targets.len()]));
        }
        if n == 0 {
            return Err(Error::shape("cross-entropy batch", &[1], &[0]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                n_classes: c,
            });
        }
        let weights: Vec<T> = match weights {
            Some(w) if w.len() != n => {
                return Err(Error::shape("cross-entropy weights", &[n], &[w.len()]));
            }
            Some(w) => w.to_vec(),
            None => vec![T::one(); n],
        };
        let mut probs = vl.data().to_vec();
        let mut loss = T::zero();
        let mut wsum = T::zero();
        for (i, row) in vl.data().chunks(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            loss += weights[i] * (lse - row[targets[i]]);
            wsum += weights[i];
        }
        softmax_rows_in_place(&mut probs, c);
        let value = Tensor::scalar(loss / wsum);
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.data().iter().copied().sum::<T>() / T::lit(vx.len().max(1) as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Multiplies by a precomputed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(Error::shape("dropout mask", &[vx.len()], &[mask.len()]));
        }
        let data = vx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Dropout { x, mask }, ng))
    }

    /// Reverse sweep from scalar `root`. Parameters of `store` that do not
    /// influence `root` receive zero gradients.
    pub fn backward(&self, root: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::shape("backward root must be scalar", &[1], root_value.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::one()]);

        let mut out: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &gy, &mut grads, &mut out)?;
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut [Tensor<T>],
    ) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let dst = out[id.index()].data_mut();
                if dst.len() != gy.len() {
                    return Err(Error::shape("parameter gradient", &[dst.len()], &[gy.len()]));
                }
                for (d, &g) in dst.iter_mut().zip(gy) {
                    *d += g;
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |g| add_into(g, gy));
                self.accum(grads, *b, |g| add_into(g, gy));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * vb[i];
                    }
                });
                self.accum(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * va[i];
                    }
                });
            }
            Op::AddRow(a, r) => {
                self.accum(grads, *a, |g| add_into(g, gy));
                let d = self.value(*r).len();
                self.accum(grads, *r, |g| {
                    for (i, &v) in gy.iter().enumerate() {
                        g[i % d] += v;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, |g| {
                    for (d, &v) in g.iter_mut().zip(gy) {
                        *d += v * s;
                    }
                });
            }
            Op::MatMul { a, b, b_t } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = node.value.shape()[1];
                if self.ng(*a) {
                    // dA = dC · op(B)ᵀ
                    self.accum(grads, *a, |g| gemm(m, n, k, gy, false, vb.data(), !*b_t, g, true));
                }
                if self.ng(*b) {
                    if *b_t {
                        // B is n×k: dB = dCᵀ · A
                        self.accum(grads, *b, |g| gemm(n, m, k, gy, true, va.data(), false, g, true));
                    } else {
                        // dB = Aᵀ · dC
                        self.accum(grads, *b, |g| gemm(k, m, n, va.data(), true, gy, false, g, true));
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                self.accum(grads, *a, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gy[j * r + i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                self.accum(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * gelu_deriv_scalar(vx[i]);
                    }
                });
            }
            Op::Map { x, deriv } => {
                self.accum(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * deriv[i];
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                self.accum(grads, *x, |g| {
                    for ((gr, yr), gyr) in g.chunks_mut(d).zip(y.chunks(d)).zip(gy.chunks(d)) {
                        let dot: T = yr.iter().zip(gyr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gr[j] += yr[j] * (gyr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                self.accum(grads, *gamma, |g| {
                    for (gyr, xr) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += gyr[j] * xr[j];
                        }
                    }
                });
                self.accum(grads, *beta, |g| {
                    for gyr in gy.chunks(d) {
                        for j in 0..d {
                            g[j] += gyr[j];
                        }
                    }
                });
                let dn = T::lit(d as f64);
                self.accum(grads, *x, |g| {
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (gr, gyr)) in g.chunks_mut(d).zip(gy.chunks(d)).enumerate() {
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = gyr[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xr[j];
                        }
                        let inv = inv_std[r] / dn;
                        for j in 0..d {
                            gr[j] += inv * (dn * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                seq,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, *bias, *heads, *seq, probs, gy, grads);
            }
            Op::MeanPool { x, group } => {
                let d = node.value.cols();
                let inv = T::one() / T::lit(*group as f64);
                let group = *group;
                self.accum(grads, *x, |g| {
                    for (r, gr) in g.chunks_mut(d).enumerate() {
                        let src = &gy[(r / group) * d..(r / group + 1) * d];
                        for j in 0..d {
                            gr[j] += src[j] * inv;
                        }
                    }
                });
            }
            Op::Interleave(inputs) => {
                let k = inputs.len();
                let d = node.value.cols();
                for (s, &inp) in inputs.iter().enumerate() {
                    self.accum(grads, inp, |g| {
                        for (b, gr) in g.chunks_mut(d).enumerate() {
                            let src = &gy[(b * k + s) * d..(b * k + s + 1) * d];
                            add_into(gr, src);
                        }
                    });
                }
            }
            Op::L2Normalize { x, norms, eps } => {
                let y = node.value.data();
                let d = node.value.cols();
                let eps = *eps;
                self.accum(grads, *x, |g| {
                    for (r, gr) in g.chunks_mut(d).enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gyr = &gy[r * d..(r + 1) * d];
                        if norms[r] > eps {
                            let dot: T = yr.iter().zip(gyr).map(|(&a, &b)| a * b).sum();
                            let inv = T::one() / norms[r];
                            for j in 0..d {
                                gr[j] += (gyr[j] - yr[j] * dot) * inv;
                            }
                        } else {
                            for j in 0..d {
                                gr[j] += gyr[j] / eps;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.value(*logits).shape()[1];
                let wsum: T = weights.iter().copied().sum();
                let up = gy[0];
                self.accum(grads, *logits, |g| {
                    for (i, gr) in g.chunks_mut(c).enumerate() {
                        let f = up * weights[i] / wsum;
                        let p = &probs[i * c..(i + 1) * c];
                        for j in 0..c {
                            gr[j] += f * p[j];
                        }
                        gr[targets[i]] -= f;
                    }
                });
            }
            Op::Sum(x) => {
                let up = gy[0];
                self.accum(grads, *x, |g| g.iter_mut().for_each(|v| *v += up));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1);
                let up = gy[0] / T::lit(n as f64);
                self.accum(grads, *x, |g| g.iter_mut().for_each(|v| *v += up));
            }
            Op::Dropout { x, mask } => {
                self.accum(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * mask[i];
                    }
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        seq: usize,
        probs: &[T],
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.value(q).shape()[1];
        let rows = self.value(q).shape()[0];
        let dh = d / heads;
        let batch = rows / seq;
        let scale = T::one() / T::lit(dh as f64).sqrt();

        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let bias_heads = bias.map(|b| self.value(b).shape()[0]).unwrap_or(0);
        let mut dbias = vec![T::zero(); bias_heads * seq * seq];
        let mut dp = vec![T::zero(); seq * seq];
        let mut ds = vec![T::zero(); seq * seq];

        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[((b * heads + h) * seq) * seq..((b * heads + h + 1) * seq) * seq];
                let off = |row: usize| (b * seq + row) * d + h * dh;
                for i in 0..seq {
                    let go = &gy[off(i)..off(i) + dh];
                    for j in 0..seq {
                        let vj = &vd[off(j)..off(j) + dh];
                        let mut acc = T::zero();
                        for t in 0..dh {
                            acc += go[t] * vj[t];
                        }
                        dp[i * seq + j] = acc;
                        let w = p[i * seq + j];
                        let dvj = &mut dv[off(j)..off(j) + dh];
                        for t in 0..dh {
                            dvj[t] += w * go[t];
                        }
                    }
                }
                for i in 0..seq {
                    let row_dot: T = (0..seq).map(|j| p[i * seq + j] * dp[i * seq + j]).sum();
                    for j in 0..seq {
                        ds[i * seq + j] = p[i * seq + j] * (dp[i * seq + j] - row_dot);
                    }
                }
                if bias_heads > 0 {
                    let bh = if bias_heads == 1 { 0 } else { h };
                    for (dst, &src) in dbias[bh * seq * seq..(bh + 1) * seq * seq].iter_mut().zip(&ds) {
                        *dst += src;
                    }
                }
                for i in 0..seq {
                    for j in 0..seq {
                        let s = ds[i * seq + j] * scale;
                        if s == T::zero() {
                            continue;
                        }
                        for t in 0..dh {
                            dq[off(i) + t] += s * kd[off(j) + t];
                            dk[off(j) + t] += s * qd[off(i) + t];
                        }
                    }
                }
            }
        }
        self.accum(grads, q, |g| add_into(g, &dq));
        self.accum(grads, k, |g| add_into(g, &dk));
        self.accum(grads, v, |g| add_into(g, &dv));
        if let Some(bv) = bias {
            self.accum(grads, bv, |g| add_into(g, &dbias));
        }
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let g = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(g);
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor<f64>) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn identity_has_unit_gradient() {
        let (s, id) = store_with("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let w = g.param(&s, id);
        let grads = g.backward(w, &s).unwrap();
        assert_eq!(grads.get(id).data(), &[1.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let w0 = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let (s, id) = store_with("w", w0.clone());
        let mut g = Graph::new();
        let w = g.param(&s, id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss, &s).unwrap();
        let expected: Vec<f64> = w0.data().iter().map(|x| 2.0 * x).collect();
        assert_eq!(grads.get(id).data(), expected.as_slice());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let (s, id) = store_with("w", Tensor::zeros(vec![2]));
        let mut g = Graph::new();
        let w = g.param(&s, id);
        assert!(g.backward(w, &s).is_err());
    }

    #[test]
    fn unreached_parameters_get_zero_gradient() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("a", Tensor::scalar(2.0)).unwrap();
        let b = s.insert("b", Tensor::full(vec![2], 5.0)).unwrap();
        let mut g = Graph::new();
        let va = g.param(&s, a);
        let loss = g.scale(va, 4.0);
        let grads = g.backward(loss, &s).unwrap();
        assert_eq!(grads.get(a).data(), &[4.0]);
        assert_eq!(grads.get(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![2, 6]));
        let err = g.attention(x, x, x, 4, 1, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            g.softmax_cross_entropy(x, &[3], None),
            Err(Error::LabelOutOfRange { label: 3, n_classes: 3 })
        ));
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let w0 = Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let (s, id) = store_with("w", w0);
        let mut g = Graph::new();
        let w = g.param(&s, id);
        let sm = g.softmax(w).unwrap();
        let t = g.transpose(sm).unwrap();
        let prod = g.matmul(sm, t).unwrap();
        let loss = g.sum(prod);
        let a = g.backward(loss, &s).unwrap();
        let b = g.backward(loss, &s).unwrap();
        assert_eq!(a.get(id), b.get(id));
    }
}
