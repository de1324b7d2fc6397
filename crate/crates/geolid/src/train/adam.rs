use std::collections::BTreeMap;

use crate::autodiff::{Gradients, ParameterSet, Real, Tensor};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPS: f64 = 1e-8;

/// Adam with bias correction. Moments exist only for trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros = || -> BTreeMap<String, Tensor<T>> {
            params
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape())))
                .collect()
        };
        Self { t: 0, m: zeros(), v: zeros() }
    }

    /// One update. Every gradient is checked before anything is modified, so
    /// a non-finite entry leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            if !p.trainable {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| Error::NotFound(format!("gradient for `{name}`")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam", format!("gradient of `{name}` is {:?}", g.shape())));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in `{name}` at entry {i}",
                    g.data()[i]
                )));
            }
        }
        self.t += 1;
        let c = T::from_f64_lossy;
        let (b1, b2) = (c(BETA1), c(BETA2));
        let bc1 = c(1.0 - BETA1.powi(self.t as i32));
        let bc2 = c(1.0 - BETA2.powi(self.t as i32));
        let (lr, eps) = (c(lr), c(EPS));
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = grads.get(name).expect("checked above");
            let m = self.m.get_mut(name).ok_or_else(|| Error::NotFound(format!("moment for `{name}`")))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::NotFound(format!("moment for `{name}`")))?;
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
