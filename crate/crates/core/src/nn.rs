//! Named parameters and the small layer set the model is assembled from.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Position of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of learnable tensors addressed by unique path strings.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        t.set_requires_grad(true);
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Records every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        Binding(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Adds the gradients reached in `g` into each parameter's accumulator.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, binding: &Binding) {
        for (t, &v) in self.tensors.iter_mut().zip(&binding.0) {
            match g.grad(v) {
                Some(grad) => t.accumulate_grad(grad),
                None => t.accumulate_grad(&vec![T::zero(); t.numel()]),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Graph handles of a [`ParamStore`] bound for one forward pass.
#[derive(Debug, Clone)]
pub struct Binding(Vec<Var>);

impl Binding {
    /// Binding over graph variables listed in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// How an [`Affine`] weight is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform,
    Zeros,
    Identity,
}

/// `y = x·W + b` with `W: [in×out]`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Affine {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let w = match init {
            Init::Uniform => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng)
            }
            Init::Zeros => Tensor::zeros(&[fan_in, fan_out]),
            Init::Identity => Tensor::from_fn(&[fan_in, fan_out], |i| {
                if i / fan_out == i % fan_out {
                    T::one()
                } else {
                    T::zero()
                }
            }),
        };
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Affine {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        g.affine(x, b[self.weight], self.bias.map(|id| b[id]))
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[width]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        g.layer_norm(x, b[self.gamma], b[self.beta], LN_EPS)
    }
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d + bias)·V` on `[N×d]` rows.
///
/// `key_bias`, when given, is added to every query's logit for key `j`.
pub fn attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    key_bias: Option<Var>,
) -> Result<Var> {
    let d = *g.shape(q).last().expect("rank >= 1");
    if g.shape(k).last() != Some(&d) {
        return Err(Error::shape("attention", g.shape(q), g.shape(k)));
    }
    if g.shape(k)[g.shape(k).len() - 2] != g.shape(v)[g.shape(v).len() - 2] {
        return Err(Error::shape("attention", g.shape(k), g.shape(v)));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    if let Some(p) = key_bias {
        let axis = g.shape(logits).len() - 1;
        logits = g.add_broadcast(logits, p, axis)?;
    }
    let weights = g.softmax_rows(logits);
    g.matmul(weights, v)
}

/// Multi-head self-attention with one projection triple per head.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    heads: Vec<[Affine; 3]>,
    out: Affine,
}

impl SelfAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config("heads", format!("{heads} heads do not divide width {dim}")));
        }
        let hd = dim / heads;
        let mut hs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mk = |store: &mut ParamStore<T>, rng: &mut R, s: &str| {
                Affine::new(store, rng, &format!("{name}.head{h}.{s}"), dim, hd, true, Init::Uniform)
            };
            let q = mk(store, rng, "query")?;
            let k = mk(store, rng, "key")?;
            let v = mk(store, rng, "value")?;
            hs.push([q, k, v]);
        }
        let out = Affine::new(store, rng, &format!("{name}.out"), dim, dim, true, Init::Uniform)?;
        Ok(SelfAttention { heads: hs, out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.heads.len());
        for [q, k, v] in &self.heads {
            let (q, k, v) = (q.forward(g, b, x)?, k.forward(g, b, x)?, v.forward(g, b, x)?);
            outs.push(attention(g, q, k, v, None)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.out.forward(g, b, joined)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    fc1: Affine,
    fc2: Affine,
}

pub const MLP_RATIO: usize = 2;

impl TransformerBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Affine::new(store, rng, &format!("{name}.fc1"), dim, dim * MLP_RATIO, true, Init::Uniform)?,
            fc2: Affine::new(store, rng, &format!("{name}.fc2"), dim * MLP_RATIO, dim, true, Init::Uniform)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, b, x)?;
        let h = self.attn.forward(g, b, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, b, x)?;
        let h = self.fc1.forward(g, b, h)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, b, h)?;
        g.add(x, h)
    }
}
