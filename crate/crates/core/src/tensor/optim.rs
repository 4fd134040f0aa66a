//! First-order optimizers over a [`ParamStore`].

use std::collections::BTreeMap;

use super::{Grads, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// One SGD-with-momentum update of a flat parameter slice:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
pub fn sgd_momentum_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd: param {} grad {} velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// One bias-corrected Adam update with coupled weight decay (`g ← g + λ·p`).
/// `step` is the 1-based update count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: T,
    config: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(Error::shape(format!(
            "adam: param {} grad {} moments {}/{}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let eps = T::of(config.eps);
    let wd = T::of(config.weight_decay);
    let one = T::one();
    let c1 = one - b1.powi(step as i32);
    let c2 = one - b2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i] + wd * param[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

fn grad_for<T: Scalar>(grads: &Grads<T>, store: &ParamStore<T>, id: ParamId) -> Result<Tensor<T>> {
    let p = store.get(id);
    let g = grads.param_or_zeros(id, p.shape());
    if g.shape() != p.shape() {
        return Err(Error::shape(format!(
            "gradient for `{}` is {:?}, parameter is {:?}",
            store.param(id).name,
            g.shape(),
            p.shape()
        )));
    }
    Ok(g)
}

/// SGD with momentum; velocity buffers are created lazily per parameter.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, ids: &[ParamId], lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        for &id in ids {
            let g = grad_for(grads, store, id)?;
            let n = g.numel();
            let vel = self.velocity.entry(id).or_insert_with(|| vec![T::zero(); n]);
            sgd_momentum_update(
                store.get_mut(id).data_mut(),
                g.data(),
                vel,
                T::of(lr),
                T::of(self.config.momentum),
                T::of(self.config.weight_decay),
            )?;
        }
        Ok(())
    }

    /// Velocity buffers keyed `velocity.<param name>`.
    pub fn state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        self.velocity
            .iter()
            .map(|(&id, v)| {
                let shape = store.get(id).shape().to_vec();
                (
                    format!("velocity.{}", store.param(id).name),
                    Tensor::new(shape, v.clone()).expect("velocity matches parameter"),
                )
            })
            .collect()
    }

    pub fn load_state(&mut self, store: &ParamStore<T>, state: &[(String, Tensor<T>)]) -> Result<()> {
        self.velocity.clear();
        for (name, t) in state {
            let Some(pname) = name.strip_prefix("velocity.") else { continue };
            let id = store
                .find(pname)
                .ok_or_else(|| Error::UnknownParam(pname.to_string()))?;
            self.velocity.insert(id, t.data().to_vec());
        }
        Ok(())
    }
}

/// Adam with coupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, ids: &[ParamId], lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&self.config.beta1) || !(0.0..1.0).contains(&self.config.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        self.step += 1;
        for &id in ids {
            let g = grad_for(grads, store, id)?;
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            adam_update(
                store.get_mut(id).data_mut(),
                g.data(),
                m,
                v,
                self.step,
                T::of(lr),
                &self.config,
            )?;
        }
        Ok(())
    }

    /// Moment buffers keyed `m.<name>` / `v.<name>`, plus the step count.
    pub fn state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("step".to_string(), Tensor::scalar(T::of(self.step as f64)))];
        for (&id, (m, v)) in &self.moments {
            let shape = store.get(id).shape().to_vec();
            let name = &store.param(id).name;
            out.push((format!("m.{name}"), Tensor::new(shape.clone(), m.clone()).expect("shape")));
            out.push((format!("v.{name}"), Tensor::new(shape, v.clone()).expect("shape")));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore<T>, state: &[(String, Tensor<T>)]) -> Result<()> {
        self.moments.clear();
        self.step = 0;
        for (name, t) in state {
            if name == "step" {
                self.step = t.item().f64().round() as u64;
                continue;
            }
            let (slot, pname) = match (name.strip_prefix("m."), name.strip_prefix("v.")) {
                (Some(p), _) => (0, p),
                (_, Some(p)) => (1, p),
                _ => continue,
            };
            let id = store
                .find(pname)
                .ok_or_else(|| Error::UnknownParam(pname.to_string()))?;
            let n = t.numel();
            let entry = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            if slot == 0 {
                entry.0 = t.data().to_vec();
            } else {
                entry.1 = t.data().to_vec();
            }
        }
        Ok(())
    }
}
