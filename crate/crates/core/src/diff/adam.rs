use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::{Error, Result};

/// What to do when a gradient contains NaN or infinity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NonFinitePolicy {
    #[default]
    Fail,
    /// Leave every parameter and moment untouched for this step.
    Skip,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub on_non_finite: NonFinitePolicy,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            on_non_finite: NonFinitePolicy::Fail,
        }
    }
}

/// First and second moments plus the bias-correction step count of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    // lr * m_hat / (sqrt(v_hat) + eps) with the corrections folded into scalars.
    let step = T::of(cfg.lr / c1);
    let inv_c2 = T::of(1.0 / c2);
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let eps = T::of(cfg.eps);
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1t * state.m[i] + ob1 * g;
        let v = b2t * state.v[i] + ob2 * g * g;
        state.m[i] = m;
        state.v[i] = v;
        params[i] -= step * m / ((v * inv_c2).sqrt() + eps);
    }
}

/// Named trainable tensors in a fixed (lexicographic) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    /// Looks up a tensor that the caller's layout guarantees exists.
    pub fn expect(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Adam over a [`ParamStore`], one [`AdamState`] per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub states: BTreeMap<String, AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            states: BTreeMap::new(),
        }
    }

    /// Applies one update. Returns `false` if the step was skipped because of
    /// non-finite gradients under [`NonFinitePolicy::Skip`].
    ///
    /// Parameters without an entry in `grads` are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<bool> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            match self.cfg.on_non_finite {
                NonFinitePolicy::Fail => return Err(Error::NonFinite(format!("gradient of `{name}`"))),
                NonFinitePolicy::Skip => return Ok(false),
            }
        }
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid("adam", format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let st = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(g.len()));
            adam_step(p.data_mut(), g.data(), st, &self.cfg);
        }
        Ok(true)
    }
}
