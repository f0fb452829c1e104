use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::real::Real;
use super::tensor::{Shape, Tensor};
use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimiser.
    Trainable,
    /// Running statistics; never receives gradients.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub frozen: bool,
    pub kind: ParamKind,
}

impl<T: Real> Parameter<T> {
    /// Whether backward passes should produce a gradient for this parameter.
    pub fn wants_grad(&self) -> bool {
        self.kind == ParamKind::Trainable && !self.frozen
    }
}

/// Named parameter registry owned by one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> ParamId {
        self.params.push(Parameter { name: name.into(), tensor, grad: None, frozen: false, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind == ParamKind::Trainable).map(|p| p.tensor.numel()).sum()
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
            p.grad = None;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.params.iter().all(|p| p.frozen)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn has_any_grad(&self) -> bool {
        self.params.iter().any(|p| p.grad.is_some())
    }

    /// Adds the gradients a backward pass left on this store's parameter
    /// leaves. `tag` identifies the store inside a multi-model graph.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, tag: u32) -> Result<()> {
        for (pid, grad) in graph.param_grads(tag) {
            let p = &mut self.params[pid.0];
            if !p.wants_grad() {
                return Err(Error::FrozenViolation(p.name.clone()));
            }
            match &mut p.grad {
                Some(g) => g.iter_mut().zip(grad).for_each(|(a, &b)| *a += b),
                None => p.grad = Some(grad.to_vec()),
            }
        }
        Ok(())
    }

    /// Folds train-mode batch statistics recorded in `graph` into the
    /// running buffers: `running = momentum·running + (1 − momentum)·batch`.
    pub fn apply_bn_updates(&mut self, graph: &Graph<T>, tag: u32, momentum: T) {
        for u in graph.bn_updates(tag) {
            for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let run = self.params[id.0].tensor.data_mut();
                for (r, &b) in run.iter_mut().zip(batch.iter()) {
                    *r = momentum * *r + (T::one() - momentum) * b;
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    grad: None,
                    frozen: p.frozen,
                    kind: p.kind,
                })
                .collect(),
        }
    }

    /// `(name, shape, values)` for every parameter, in registration order.
    pub fn export_values(&self) -> Vec<(String, Shape, Vec<f32>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape(), p.tensor.data().iter().map(|v| v.as_f64() as f32).collect()))
            .collect()
    }

    /// Replaces every tensor's values from `(name, shape, values)` triples,
    /// which must list exactly this store's parameters in order.
    pub fn load_values(&mut self, entries: &[(String, Shape, Vec<f32>)]) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} stored tensors for {} parameters",
                entries.len(),
                self.params.len()
            )));
        }
        for (p, (name, shape, values)) in self.params.iter_mut().zip(entries) {
            if &p.name != name || p.tensor.shape() != *shape {
                return Err(Error::ShapeMismatch(format!(
                    "stored {name} {shape:?} vs parameter {} {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::new(*shape, values.iter().map(|&v| T::cst(v as f64)).collect())?;
        }
        Ok(())
    }
}

/// He-normal initialisation: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Real, R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = Float::sqrt(2.0 / fan_in as f64);
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..super::tensor::numel(shape)).map(|_| T::cst(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

pub fn constant<T: Real>(shape: Shape, v: f64) -> Tensor<T> {
    Tensor::new(shape, vec![T::cst(v); super::tensor::numel(shape)]).expect("shape matches")
}
