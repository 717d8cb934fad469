//! Named parameters and the Adam optimizer.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its gradient buffer and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Option<Vec<Real>>,
    adam_m: Vec<Real>,
    adam_v: Vec<Real>,
    step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            value,
            grad: None,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }

    /// Rebuilds a parameter with explicit optimizer state (checkpoint loading).
    pub fn with_state(
        name: impl Into<String>,
        value: Tensor,
        adam_m: Vec<Real>,
        adam_v: Vec<Real>,
        step_count: u64,
    ) -> Result<Self> {
        let name = name.into();
        if adam_m.len() != value.len() || adam_v.len() != value.len() {
            return Err(Error::ShapeMismatch {
                op: "parameter",
                lhs: value.shape().to_vec(),
                rhs: vec![adam_m.len(), adam_v.len()],
            });
        }
        Ok(Self {
            name,
            value,
            grad: None,
            adam_m,
            adam_v,
            step_count,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    pub fn adam_m(&self) -> &[Real] {
        &self.adam_m
    }

    pub fn adam_v(&self) -> &[Real] {
        &self.adam_v
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// Owns every parameter of a model, addressed by [`ParamId`] or unique name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.push(Parameter::new(name, value))
    }

    pub fn push(&mut self, param: Parameter) -> Result<ParamId> {
        if self.find(&param.name).is_some() {
            return Err(Error::DuplicateParam(param.name));
        }
        self.params.push(param);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds a backward pass's gradients into the parameter buffers.
    ///
    /// Every parameter receives a gradient buffer, zero when the pass did not
    /// reach it, so a following [`Adam::step`] can run over the whole store.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.value.len()]);
            }
        }
        for (id, g) in grads.params() {
            if let Some(g) = g {
                let buf = self.params[id.0].grad.as_mut().expect("initialized above");
                for (d, &s) in buf.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    /// Drops every gradient buffer.
    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: Real) -> Self {
        Self { lr, ..Self::default() }
    }

    /// Applies one update to every parameter and clears the gradients.
    ///
    /// Fails before touching anything if some parameter has no gradient.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        for p in &mut store.params {
            let grad = p.grad.take().expect("checked above");
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = 1.0 - libm::pow(self.beta1, t as Real);
            let c2 = 1.0 - libm::pow(self.beta2, t as Real);
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grad[i];
                p.adam_m[i] = self.beta1 * p.adam_m[i] + (1.0 - self.beta1) * g;
                p.adam_v[i] = self.beta2 * p.adam_v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.adam_m[i] / c1;
                let v_hat = p.adam_v[i] / c2;
                values[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as Real);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Normal with mean 0 and standard deviation `std`.
pub fn init_normal<R: Rng>(rng: &mut R, shape: &[usize], std: Real) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}
