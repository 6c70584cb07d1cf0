//! Parameterised building blocks on top of [`Graph`].
//!
//! Layers are small structs of [`ParamId`]s into a [`ParamStore`]; a [`Binder`]
//! lazily records the stored tensors as graph leaves during one forward pass.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, NormStats, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Norm floor used wherever features are unit-normalized.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Number of scalar values across `ids`.
    pub fn count(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter().map(|id| self.get(id).numel()).sum()
    }
}

/// Maps store parameters to graph leaves for one forward pass.
pub struct Binder<'a, T: Element> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Element> Binder<'a, T> {
    /// With `trainable == false` parameters enter the graph as constants.
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn var(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Parameters recorded so far, in store order.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

/// Uniform(−√(6/fan_in), √(6/fan_in)).
pub fn he_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// `x·W + b` for `x: N×din`, `W: din×dout`.
pub fn dense<T: Element>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.bias_add(y, b, 1)
}

/// Inverted dropout: zeroes each element with probability `p` and scales the rest by `1/(1−p)`.
pub fn dropout<T: Element>(g: &mut Graph<T>, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask = (0..g.value(x).numel())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    g.mask(x, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropBlockConfig {
    pub block_size: usize,
    pub drop_prob: f64,
}

impl Default for DropBlockConfig {
    fn default() -> Self {
        Self {
            block_size: 3,
            drop_prob: 0.15,
        }
    }
}

impl DropBlockConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.block_size == 0 || self.block_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "dropblock block size must be odd and positive, got {}",
                self.block_size
            )));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::config(format!(
                "dropblock probability {} outside [0, 1)",
                self.drop_prob
            )));
        }
        if self.block_size > h || self.block_size > w {
            return Err(Error::config(format!(
                "dropblock block size {} exceeds feature map {h}x{w}",
                self.block_size
            )));
        }
        Ok(())
    }

    /// Bernoulli rate of block seeds: `p·H·W / (bs²·(H−bs+1)·(W−bs+1))`.
    pub fn seed_rate(&self, h: usize, w: usize) -> f64 {
        let bs = self.block_size;
        self.drop_prob * (h * w) as f64 / ((bs * bs) as f64 * ((h - bs + 1) * (w - bs + 1)) as f64)
    }
}

/// Sample mask for [`dropblock`] over an `n×c×h×w` map (1 = kept, 0 = dropped).
pub fn dropblock_mask(shape: [usize; 4], cfg: &DropBlockConfig, rng: &mut impl Rng) -> Vec<bool> {
    let [n, c, h, w] = shape;
    let bs = cfg.block_size;
    let half = bs / 2;
    let gamma = cfg.seed_rate(h, w);
    let mut keep = vec![true; n * c * h * w];
    for plane in keep.chunks_mut(h * w) {
        // Seeds are drawn only where the whole block fits inside the map.
        for sy in half..h - half {
            for sx in half..w - half {
                if rng.random::<f64>() < gamma {
                    for y in sy - half..=sy + half {
                        plane[y * w + sx - half..=y * w + sx + half].fill(false);
                    }
                }
            }
        }
    }
    keep
}

/// Structured dropout of contiguous `block_size × block_size` regions of `N×C×H×W` maps.
pub fn dropblock<T: Element>(g: &mut Graph<T>, x: Var, cfg: &DropBlockConfig, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("dropblock", &s, &[]));
    }
    cfg.validate(s[2], s[3])?;
    if mode == Mode::Eval || cfg.drop_prob == 0.0 {
        return Ok(x);
    }
    let keep = dropblock_mask([s[0], s[1], s[2], s[3]], cfg, rng);
    let kept = keep.iter().filter(|&&k| k).count();
    let scale = if kept == 0 {
        T::zero()
    } else {
        T::of(keep.len() as f64 / kept as f64)
    };
    let mask = keep.iter().map(|&k| if k { scale } else { T::zero() }).collect();
    g.mask(x, mask)
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running ← (1−m)·running + m·batch`.
    pub fn absorb(&mut self, update: &BatchNormUpdate<T>) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&update.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&update.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Batch statistics observed in train mode, to be folded into running stats.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormUpdate<T = f32> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// Batch normalization; train mode also returns the batch statistics.
pub fn batchnorm<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &BatchNormStats<T>,
    mode: Mode,
) -> Result<(Var, Option<BatchNormUpdate<T>>)> {
    match mode {
        Mode::Train => {
            let out = g.batch_norm(x, gamma, beta, NormStats::Batch, BN_EPS)?;
            let update = out.batch_mean.zip(out.batch_var).map(|(mean, var)| BatchNormUpdate { mean, var });
            Ok((out.output, update))
        }
        Mode::Eval => {
            let stats = NormStats::Running {
                mean: &stats.mean,
                var: &stats.var,
            };
            Ok((g.batch_norm(x, gamma, beta, stats, BN_EPS)?.output, None))
        }
    }
}

/// Mean over every axis after the channel axis: `N×C×… → N×C`.
pub fn global_avg_pool<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let rank = g.shape(x).len();
    if rank < 2 {
        return Err(Error::shape("global_avg_pool", g.shape(x), &[]));
    }
    if rank == 2 {
        return Ok(x);
    }
    let axes: Vec<usize> = (2..rank).collect();
    g.mean_axes(x, &axes)
}

/// Single-head scaled dot-product self-attention over the `H·W` positions of
/// `N×C×H×W`, with a residual connection: `x + softmax(QKᵀ/√C)·V`.
pub fn self_attention<T: Element>(g: &mut Graph<T>, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("self_attention", &s, &[]));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    for wm in [wq, wk, wv] {
        if g.shape(wm) != [c, c] {
            return Err(Error::shape("self_attention projection", g.shape(wm), &[c, c]));
        }
    }
    let l = h * w;
    let tokens = g.permute(x, &[0, 2, 3, 1])?;
    let flat = g.reshape(tokens, &[n * l, c])?;
    let project = |g: &mut Graph<T>, wm: Var| -> Result<Var> {
        let p = g.matmul(flat, wm)?;
        g.reshape(p, &[n, l, c])
    };
    let q = project(g, wq)?;
    let k = project(g, wk)?;
    let v = project(g, wv)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.mul_scalar(scores, T::of(1.0 / (c as f64).sqrt()));
    let attn = g.softmax(scores, 2)?;
    let mixed = g.bmm(attn, v, false)?;
    let tokens = g.reshape(tokens, &[n, l, c])?;
    let out = g.add(tokens, mixed)?;
    let out = g.reshape(out, &[n, h, w, c])?;
    g.permute(out, &[0, 3, 1, 2])
}
