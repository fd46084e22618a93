use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{config, contract, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Slot<T> {
    name: String,
    value: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

/// Named parameters plus their AdamW state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    slots: Vec<Slot<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let n = value.len();
        let id = ParamId(self.slots.len());
        self.slots.push(Slot {
            name: name.to_string(),
            value: value.with_requires_grad(true),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            steps: 0,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    /// Uniform(-a, a) with `a = sqrt(1 / fan_in)`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let a = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(-a..a)))
            .collect();
        self.insert(name, Tensor::from_vec(shape, data))
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.value))
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.slots[id.0].steps
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Copy of the parameter values in another precision; optimizer state is reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for s in &self.slots {
            out.insert(&s.name, s.value.cast());
        }
        out
    }

    /// Replaces parameter values (not optimizer state) from another store by name.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, value) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| contract(format!("unknown parameter {name}")))?;
            if self.get(id).shape() != value.shape() {
                return Err(contract(format!("shape mismatch for {name}")));
            }
            self.slots[id.0].value = value.clone().with_requires_grad(true);
        }
        Ok(())
    }
}

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(config("lr", "learning rate must be positive"));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    /// One decoupled-weight-decay Adam step over every parameter in `store`.
    ///
    /// `grads` must be aligned with the store's parameter order.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        self.validate()?;
        if grads.len() != store.slots.len() {
            return Err(contract("gradient count does not match parameter count"));
        }
        for (slot, g) in store.slots.iter_mut().zip(grads) {
            if g.shape() != slot.value.shape() {
                return Err(contract(format!("gradient shape mismatch for {}", slot.name)));
            }
            slot.steps += 1;
            let t = slot.steps as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = 1.0 - self.lr * self.weight_decay;
            let p = slot.value.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i].as_f64();
                let m = self.beta1 * slot.m[i].as_f64() + (1.0 - self.beta1) * gi;
                let v = self.beta2 * slot.v[i].as_f64() + (1.0 - self.beta2) * gi * gi;
                slot.m[i] = T::from_f64_lossy(m);
                slot.v[i] = T::from_f64_lossy(v);
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                p[i] = T::from_f64_lossy(p[i].as_f64() * decay - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f32) -> (ParamStore<f32>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::from_vec(&[1], vec![v]));
        (s, id)
    }

    #[test]
    fn first_step_closed_form() {
        let (mut s, id) = scalar_store(1.0);
        let opt = AdamW {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut s, &[Tensor::from_vec(&[1], vec![0.5])]).unwrap();
        let expected = 1.0 - 1e-3 * (0.5 / (0.25f64.sqrt() + 1e-8));
        assert!((s.get(id).data()[0] as f64 - expected).abs() < 1e-7);
        assert_eq!(s.steps(id), 1);
    }

    #[test]
    fn decoupled_decay_closed_form() {
        let (mut s, id) = scalar_store(1.0);
        let opt = AdamW {
            lr: 1e-3,
            weight_decay: 0.01,
            ..AdamW::default()
        };
        opt.step(&mut s, &[Tensor::from_vec(&[1], vec![0.0])]).unwrap();
        assert!((s.get(id).data()[0] as f64 - 0.99999).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let (mut s, id) = scalar_store(0.123_456_7);
        let before = s.get(id).clone();
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for _ in 0..50 {
            opt.step(&mut s, &[Tensor::from_vec(&[1], vec![0.0])]).unwrap();
        }
        assert_eq!(s.get(id).data(), before.data());
        assert_eq!(s.steps(id), 50);
    }

    #[test]
    fn non_positive_lr_is_a_config_error() {
        let (mut s, _) = scalar_store(1.0);
        let opt = AdamW {
            lr: 0.0,
            ..AdamW::default()
        };
        let err = opt.step(&mut s, &[Tensor::from_vec(&[1], vec![0.0])]).unwrap_err();
        assert!(matches!(err, crate::Error::Config { ref key, .. } if key == "lr"));
    }
}
