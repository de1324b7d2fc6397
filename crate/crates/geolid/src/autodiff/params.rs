use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use super::tape::{Grads, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<T> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateKey { key: name, line: 0 });
        }
        self.params.insert(name, Parameter { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Gradient per parameter name, shaped like the parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ParameterSet<T>) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(k, p)| (k.to_string(), Tensor::zeros(p.value.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.grads.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += other * weight`, entry by entry.
    pub fn add_scaled(&mut self, other: &Gradients<T>, weight: T) {
        for (k, g) in self.grads.iter_mut() {
            if let Some(o) = other.grads.get(k) {
                for (a, &b) in g.data_mut().iter_mut().zip(o.data()) {
                    *a = *a + b * weight;
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }

    /// Largest absolute entry across all gradients whose name starts with `prefix`.
    pub fn max_abs_with_prefix(&self, prefix: &str) -> f64 {
        self.grads
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| v.abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}

/// Lazily places parameters on a tape as differentiable leaves and maps
/// node gradients back to parameter names.
pub struct Binder<'t, 'p, T: Real> {
    tape: &'t Tape<T>,
    params: &'p ParameterSet<T>,
    bound: RefCell<HashMap<String, Var<'t, T>>>,
}

impl<'t, 'p, T: Real> Binder<'t, 'p, T> {
    pub fn new(tape: &'t Tape<T>, params: &'p ParameterSet<T>) -> Self {
        Self {
            tape,
            params,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn params(&self) -> &'p ParameterSet<T> {
        self.params
    }

    /// The tape variable for a parameter, created on first use.
    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = self.params.value(name)?.clone();
        let v = self.tape.var(value);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Collects per-parameter gradients; parameters not reached by the sweep
    /// (or never bound) get zeros.
    pub fn gradients(&self, grads: &Grads<T>) -> Gradients<T> {
        let bound = self.bound.borrow();
        let mut out = Gradients::zeros_like(self.params);
        for (name, g) in out.grads.iter_mut() {
            if let Some(v) = bound.get(name) {
                if let Some(t) = grads.get(*v) {
                    *g = t;
                }
            }
        }
        out
    }

    pub fn backward(&self, loss: Var<'t, T>) -> Result<Gradients<T>> {
        let grads = loss.backward()?;
        Ok(self.gradients(&grads))
    }
}
