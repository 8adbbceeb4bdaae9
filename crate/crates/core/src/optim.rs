//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// One update of every parameter. Parameters without a gradient are
    /// treated as having a zero gradient, so they still decay.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, state: &mut AdamState<T>) -> Result<()> {
        if grads.len() != store.len() || state.m.len() != store.len() {
            return Err(Error::Usage(format!(
                "optimizer sized for {} parameters, store has {}, gradients {}",
                state.m.len(),
                store.len(),
                grads.len()
            )));
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let theta = store.get_mut(id);
            if let Some(g) = grads.get(id) {
                if g.shape() != theta.shape() {
                    return Err(Error::shape("optimizer step", theta.shape(), g.shape()));
                }
            }
            let g = grads.get(id).map(Tensor::data);
            let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
            for (k, p) in theta.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g[k].as_f64());
                let mk = self.beta1 * m[k].as_f64() + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v[k].as_f64() + (1.0 - self.beta2) * gk * gk;
                m[k] = T::from_f64(mk);
                v[k] = T::from_f64(vk);
                let update = (mk / c1) / ((vk / c2).sqrt() + self.eps) + self.weight_decay * p.as_f64();
                *p = T::from_f64(p.as_f64() - self.lr * update);
            }
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}
