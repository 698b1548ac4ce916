use std::collections::HashMap;

use super::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A learnable tensor together with its gradient buffer and AdamW moments.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
    moment1: Vec<f64>,
    moment2: Vec<f64>,
    step_count: u64,
    trainable: bool,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let n = value.len();
        Self {
            name,
            grad: Tensor::zeros(value.shape()),
            value,
            moment1: vec![0.0; n],
            moment2: vec![0.0; n],
            step_count: 0,
            trainable: true,
        }
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

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.moment1, &self.moment2)
    }
}

/// Named parameter registry. Insertion order is stable and defines
/// checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId, TensorError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter, TensorError> {
        Ok(self.get(self.id(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        p.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    /// Sum of squared values over trainable parameters.
    pub fn l2_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.sum_squares())
            .sum()
    }

    /// Replaces values (not optimizer state) from another store with the same
    /// names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        for p in &mut self.params {
            let src = other.by_name(&p.name)?;
            if src.value.shape() != p.value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "shape of `{}`: expected {:?}, found {:?}",
                    p.name,
                    p.value.shape(),
                    src.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// AdamW with bias correction and decoupled weight decay:
///
/// ```text
/// m ← β₁m + (1-β₁)g          v ← β₂v + (1-β₂)g²
/// m̂ = m / (1-β₁ᵗ)            v̂ = v / (1-β₂ᵗ)
/// θ ← θ - lr·m̂/(√v̂ + ε) - lr·wd·θ
/// ```
#[derive(Clone, Copy, Debug, PartialEq)]
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
            weight_decay: 0.0,
        }
    }
}

impl AdamW {
    /// Updates every trainable parameter from its accumulated gradient.
    /// Gradients are left in place.
    pub fn step(&self, store: &mut ParamStore) {
        for p in store.params.iter_mut().filter(|p| p.trainable) {
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let grad = p.grad.data();
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let g = grad[i];
                p.moment1[i] = self.beta1 * p.moment1[i] + (1.0 - self.beta1) * g;
                p.moment2[i] = self.beta2 * p.moment2[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.moment1[i] / bc1;
                let v_hat = p.moment2[i] / bc2;
                let old = theta[i];
                theta[i] = old - self.lr * m_hat / (v_hat.sqrt() + self.eps) - self.lr * self.weight_decay * old;
            }
        }
    }
}
