use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ParamId, ParamStore};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with decoupled weight decay over a fixed set of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    params: Vec<ParamId>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Element> AdamW<T> {
    /// Optimizer over `params` with zeroed moments.
    pub fn new(store: &ParamStore<T>, params: Vec<ParamId>, config: AdamWConfig) -> Self {
        let zeros = |id: &ParamId| vec![T::zero(); store.get(*id).numel()];
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
            step: 0,
        }
    }

    /// Restores a saved state; moment lengths must match the parameters.
    pub fn from_state(
        store: &ParamStore<T>,
        params: Vec<ParamId>,
        config: AdamWConfig,
        m: Vec<Vec<T>>,
        v: Vec<Vec<T>>,
        step: u64,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::contract("optimizer state does not match its parameter list"));
        }
        for (i, id) in params.iter().enumerate() {
            let n = store.get(*id).numel();
            if m[i].len() != n || v[i].len() != n {
                return Err(Error::shape("optimizer moments", &[m[i].len(), v[i].len()], &[n]));
            }
        }
        Ok(Self {
            config,
            params,
            m,
            v,
            step,
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// One update. `grad(id)` must yield a gradient for every managed parameter.
    pub fn step<'g>(
        &mut self,
        store: &mut ParamStore<T>,
        mut grad: impl FnMut(ParamId) -> Option<&'g [T]>,
        lr: f64,
    ) -> Result<()>
    where
        T: 'g,
    {
        let grads: Vec<&[T]> = self
            .params
            .iter()
            .map(|&id| {
                let g = grad(id).ok_or_else(|| {
                    Error::contract(format!("missing gradient for parameter {}", store.name(id)))
                })?;
                if g.len() != store.get(id).numel() {
                    return Err(Error::shape("gradient", &[g.len()], store.get(id).shape()));
                }
                Ok(g)
            })
            .collect::<Result<_>>()?;

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let decay = T::of(1.0 - lr * c.weight_decay);
        let step_size = T::of(lr / bc1);
        let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);

        for (i, &id) in self.params.iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let g = grads[i][k];
                p[k] *= decay;
                m[k] = b1 * m[k] + one_b1 * g;
                v[k] = b2 * v[k] + one_b2 * g * g;
                let denom = v[k].sqrt() * inv_bc2_sqrt + eps;
                p[k] -= step_size * m[k] / denom;
            }
        }
        Ok(())
    }
}
