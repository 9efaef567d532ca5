//! Neural building blocks: tensor-level softmax and layer norm, parameter
//! initialisers, multi-head attention and the pre-norm encoder block.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{layer_norm_forward, softmax_rows_in_place, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if axis >= shape.len().max(1) {
        return Err(Error::Config(format!("softmax axis {axis} out of range for rank {}", shape.len())));
    }
    let len = shape.get(axis).copied().unwrap_or(1);
    if len == 0 {
        return Err(Error::shape("softmax over empty axis", &[1], &[0]));
    }
    let inner: usize = shape.iter().skip(axis + 1).product();
    let mut out = logits.clone();
    if inner == 1 {
        softmax_rows_in_place(out.data_mut(), len);
        return Ok(out);
    }
    let outer = logits.len() / (len * inner);
    let data = out.data_mut();
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            for (a, b) in buf.iter_mut().enumerate() {
                *b = data[(o * len + a) * inner + i];
            }
            softmax_rows_in_place(&mut buf, len);
            for (a, b) in buf.iter().enumerate() {
                data[(o * len + a) * inner + i] = *b;
            }
        }
    }
    Ok(out)
}

/// Normalises each row of the last dimension, then applies `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> Result<Tensor<T>> {
    let d = *x.shape().last().unwrap_or(&1);
    if d == 0 {
        return Err(Error::shape("layer_norm over empty row", &[1], &[0]));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape("layer_norm affine", &[d], &[gamma.len()]));
    }
    let (out, _, _) = layer_norm_forward(x.data(), gamma, beta, eps);
    Tensor::new(x.shape().to_vec(), out)
}

pub fn glorot_uniform<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Tensor::from_fn(vec![fan_in, fan_out], |_| T::lit(dist.sample(rng)))
}

pub fn normal_init<T: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("non-negative std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// Weight `in×out` plus bias `out`.
#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert(format!("{prefix}.weight"), glorot_uniform(rng, fan_in, fan_out))?;
        let bias = store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![fan_out]))?;
        Ok(Self { weight, bias })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: lookup(store, &format!("{prefix}.weight"))?,
            bias: lookup(store, &format!("{prefix}.bias"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{prefix}.gamma"), Tensor::full(vec![d], T::one()))?,
            beta: store.insert(format!("{prefix}.beta"), Tensor::zeros(vec![d]))?,
        })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: lookup(store, &format!("{prefix}.gamma"))?,
            beta: lookup(store, &format!("{prefix}.beta"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, T::lit(LAYER_NORM_EPS))
    }
}

pub(crate) fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::malformed("parameters", format!("missing parameter `{name}`")))
}

/// Query/key/value/output projections of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
}

impl AttentionParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            query: LinearParams::register(store, &format!("{prefix}.query"), d_model, d_model, rng)?,
            key: LinearParams::register(store, &format!("{prefix}.key"), d_model, d_model, rng)?,
            value: LinearParams::register(store, &format!("{prefix}.value"), d_model, d_model, rng)?,
            output: LinearParams::register(store, &format!("{prefix}.output"), d_model, d_model, rng)?,
        })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            query: LinearParams::lookup(store, &format!("{prefix}.query"))?,
            key: LinearParams::lookup(store, &format!("{prefix}.key"))?,
            value: LinearParams::lookup(store, &format!("{prefix}.value"))?,
            output: LinearParams::lookup(store, &format!("{prefix}.output"))?,
        })
    }
}

/// Multi-head attention: project `q_in`, `k_in`, `v_in`, attend per head with
/// `softmax(QKᵀ/√d_h + bias)·V`, concatenate heads, project the result.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    n_heads: usize,
    seq: usize,
    bias: Option<Var>,
) -> Result<Var> {
    let d = *g.shape(q_in).last().unwrap_or(&0);
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {n_heads} attention heads"
        )));
    }
    let q = p.query.forward(g, store, q_in)?;
    let k = p.key.forward(g, store, k_in)?;
    let v = p.value.forward(g, store, v_in)?;
    let heads = g.attention(q, k, v, n_heads, seq, bias)?;
    p.output.forward(g, store, heads)
}

/// One pre-norm block: `x + Attn(LN(x))` then `x + MLP(LN(x))`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerParams {
    pub norm_attn: LayerNormParams,
    pub attn: AttentionParams,
    pub norm_mlp: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl EncoderLayerParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        mlp_factor: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = d_model * mlp_factor;
        Ok(Self {
            norm_attn: LayerNormParams::register(store, &format!("{prefix}.norm_attn"), d_model)?,
            attn: AttentionParams::register(store, &format!("{prefix}.attn"), d_model, rng)?,
            norm_mlp: LayerNormParams::register(store, &format!("{prefix}.norm_mlp"), d_model)?,
            fc1: LinearParams::register(store, &format!("{prefix}.mlp.fc1"), d_model, hidden, rng)?,
            fc2: LinearParams::register(store, &format!("{prefix}.mlp.fc2"), hidden, d_model, rng)?,
        })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNormParams::lookup(store, &format!("{prefix}.norm_attn"))?,
            attn: AttentionParams::lookup(store, &format!("{prefix}.attn"))?,
            norm_mlp: LayerNormParams::lookup(store, &format!("{prefix}.norm_mlp"))?,
            fc1: LinearParams::lookup(store, &format!("{prefix}.mlp.fc1"))?,
            fc2: LinearParams::lookup(store, &format!("{prefix}.mlp.fc2"))?,
        })
    }
}

/// Random dropout masks; `None` means dropout is disabled.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng> Dropout<'_, R> {
    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let scale = T::lit(1.0 / keep);
        let mask = (0..g.value(x).len())
            .map(|_| if self.rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        g.dropout(x, mask)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn encoder_layer<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &EncoderLayerParams,
    x: Var,
    n_heads: usize,
    seq: usize,
    bias: Option<Var>,
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<Var> {
    let h = p.norm_attn.forward(g, store, x)?;
    let mut a = multi_head_attention(g, store, &p.attn, h, h, h, n_heads, seq, bias)?;
    if let Some(d) = dropout.as_mut() {
        a = d.apply(g, a)?;
    }
    let x = g.add(x, a)?;
    let h = p.norm_mlp.forward(g, store, x)?;
    let h = p.fc1.forward(g, store, h)?;
    let h = g.gelu(h);
    let mut m = p.fc2.forward(g, store, h)?;
    if let Some(d) = dropout.as_mut() {
        m = d.apply(g, m)?;
    }
    g.add(x, m)
}
