use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Graph, Grads, Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        let n = value.numel();
        Self { value, grad: None, m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }
}

/// Named parameters plus Adam state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
    step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Register every parameter as a graph leaf named `{prefix}{name}`.
    pub fn leaf(&self, g: &mut Graph<T>, prefix: &str, name: &str) -> Result<super::Var> {
        Ok(g.param(format!("{prefix}{name}"), self.value(name)?.clone()))
    }

    /// Copy gradients for leaves named `{prefix}{name}` out of a backward pass.
    /// Parameters the graph never touched get zero gradients. A parameter
    /// registered several times has its gradients summed.
    pub fn set_grads(&mut self, g: &Graph<T>, grads: &Grads<T>, prefix: &str) {
        for p in self.params.values_mut() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
        for (name, grad) in g.param_grads(grads) {
            let Some(local) = name.strip_prefix(prefix) else { continue };
            if let Some(p) = self.params.get_mut(local) {
                if let Some(dst) = p.grad.as_mut() {
                    if dst.shape() == grad.shape() {
                        dst.data_mut().iter_mut().zip(grad.data()).for_each(|(a, b)| *a += *b);
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt()
    }

    /// One Adam update with bias correction; clears gradients afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::Usage(format!("adam step without gradient for {name}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64(cfg.lr / bc1);
        let inv_bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(cfg.eps);
        for p in self.params.values_mut() {
            let g = p.grad.take().expect("checked above");
            let vals = p.value.data_mut();
            for i in 0..vals.len() {
                let gi = g.data()[i];
                p.m[i] = b1 * p.m[i] + ob1 * gi;
                p.v[i] = b2 * p.v[i] + ob2 * gi * gi;
                let denom = p.v[i].sqrt() * inv_bc2_sqrt + eps;
                vals[i] -= step_size * p.m[i] / denom;
            }
        }
        Ok(())
    }

    /// Same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Config("parameter stores differ in size".into()));
        }
        for (name, p) in &self.params {
            let q = other.get(name)?;
            if q.value.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    p.value.shape(),
                    q.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                            m: p.m.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                            v: p.v.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }

    pub(crate) fn set_state(&mut self, name: &str, value: Vec<T>, m: Vec<T>, v: Vec<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if value.len() != p.value.numel() || m.len() != value.len() || v.len() != value.len() {
            return Err(Error::Shape(format!("state for {name} has the wrong length")));
        }
        p.value.data_mut().copy_from_slice(&value);
        p.m = m;
        p.v = v;
        Ok(())
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }
}

/// `ema <- rate * ema + (1 - rate) * params`.
pub fn ema_update<T: Real>(ema: &mut ParamStore<T>, params: &ParamStore<T>, rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("EMA rate {rate} outside [0, 1]")));
    }
    ema.check_compatible(params)?;
    let (r, or) = (T::from_f64(rate), T::from_f64(1.0 - rate));
    for (name, p) in ema.params.iter_mut() {
        let src = params.params[name.as_str()].value.data();
        for (e, &s) in p.value.data_mut().iter_mut().zip(src) {
            *e = r * *e + or * s;
        }
    }
    Ok(())
}
