use std::collections::BTreeMap;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { tensors: BTreeMap::new() }
    }

    /// Inserts a trainable tensor, replacing any previous entry of that name.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t.with_requires_grad(true));
    }

    /// Inserts a tensor excluded from differentiation and updates.
    pub fn insert_frozen(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t.with_requires_grad(false));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Gives every trainable tensor a gradient buffer (zeros if absent).
    pub fn ensure_grads(&mut self) {
        for t in self.tensors.values_mut() {
            if t.requires_grad() && t.grad().is_none() {
                let zeros = vec![T::zero(); t.numel()];
                t.set_grad(Some(zeros)).expect("matching length");
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            if let Some(g) = t.grad_mut() {
                g.fill(T::zero());
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.set_grad(None).expect("clearing");
        }
    }

    /// Copies values into a set of another precision; gradients are dropped.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let mut t = v.detached().cast::<U>();
                    t.set_requires_grad(v.requires_grad());
                    (k.clone(), t)
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Heavy-ball SGD: `v <- momentum * v + grad`, `p <- p - lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    pub fn velocities(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.velocity.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn set_velocity(&mut self, name: impl Into<String>, v: Vec<T>) {
        self.velocity.insert(name.into(), v);
    }

    /// Applies one update to every trainable parameter, then zeroes the
    /// gradients. Fails before touching anything if a gradient is missing.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, t) in params.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::MissingGradient(name.to_string()));
            }
        }
        for (name, t) in params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let grad = t.grad().expect("checked above").to_vec();
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![T::zero(); grad.len()]);
            for (vi, &gi) in v.iter_mut().zip(&grad) {
                *vi = self.momentum * *vi + gi;
            }
            for (p, &vi) in t.data_mut().iter_mut().zip(v.iter()) {
                *p -= self.lr * vi;
            }
            t.grad_mut().expect("present").fill(T::zero());
        }
        Ok(())
    }
}

/// One-shot form of [`Sgd::step`] with fresh (zero) momentum state.
pub fn sgd_step<T: Real>(params: &mut ParamSet<T>, lr: T, momentum: T) -> Result<()> {
    Sgd::new(lr, momentum).step(params)
}
