use std::collections::{BTreeMap, BTreeSet};

use super::config::HeadConfig;
use crate::autodiff::{Real, Var};
use crate::error::{Error, Result};

/// Named loss terms of one forward pass; `total` is what gets differentiated.
#[derive(Debug, Clone)]
pub struct Losses<'t, T> {
    pub class: Var<'t, T>,
    pub geo: Option<Var<'t, T>>,
    pub geo_inter: BTreeMap<usize, Var<'t, T>>,
    pub total: Var<'t, T>,
}

fn weight<T: Real>(name: &str, v: f64) -> Result<T> {
    if (0.0..=1.0).contains(&v) {
        Ok(T::from_f64_lossy(v))
    } else {
        Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")))
    }
}

/// Mean squared error over all entries.
pub fn mse<'t, T: Real>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(pred.sub(target)?.square().mean())
}

/// Sub-center additive angular margin softmax.
///
/// `e` is `batch x E`, `weight` is `(classes * K) x E` with the `K`
/// sub-centers of a class stored in consecutive rows. Returns the mean loss
/// and the margin-free, unscaled class cosines used at inference.
pub fn aam_subcenter_loss<'t, T: Real>(
    e: Var<'t, T>,
    weight: Var<'t, T>,
    labels: &[usize],
    cfg: &HeadConfig,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if let Some(&y) = labels.iter().find(|&&y| y >= cfg.classes) {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {} classes",
            cfg.classes
        )));
    }
    let eps = T::from_f64_lossy(1e-12);
    let w = weight.normalize_rows(eps)?;
    let cos = e
        .normalize_rows(eps)?
        .matmul(w.transpose()?)?
        .max_groups(cfg.subcenters)?;
    let loss = cos
        .angular_margin(labels, T::from_f64_lossy(cfg.margin))?
        .scale(T::from_f64_lossy(cfg.scale))
        .cross_entropy(labels)?;
    Ok((loss, cos))
}

/// `(1 - lambda) L_class + lambda L_geo`.
pub fn loss_l1<'t, T: Real>(class: Var<'t, T>, geo: Var<'t, T>, lambda: f64) -> Result<Var<'t, T>> {
    let l = weight::<T>("lambda", lambda)?;
    combine(class, geo, l)
}

fn combine<'t, T: Real>(class: Var<'t, T>, geo: Var<'t, T>, l: T) -> Result<Var<'t, T>> {
    class.scale(T::one() - l).add(geo.scale(l))
}

/// `(1 - lambda) L_class + lambda ((1 - gamma) L_geo + gamma mean_n L_geo^n)`
/// with the mean taken over `layers`, each of which must have a term.
pub fn loss_l2<'t, T: Real>(
    class: Var<'t, T>,
    geo: Var<'t, T>,
    inter: &BTreeMap<usize, Var<'t, T>>,
    layers: &BTreeSet<usize>,
    lambda: f64,
    gamma: f64,
) -> Result<Var<'t, T>> {
    let l = weight::<T>("lambda", lambda)?;
    let g = weight::<T>("gamma", gamma)?;
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no intermediate layers".into()));
    }
    let mut sum: Option<Var<'t, T>> = None;
    for n in layers {
        let term = *inter.get(n).ok_or_else(|| {
            Error::InvalidArgument(format!("missing intermediate geolocation loss for layer {n}"))
        })?;
        sum = Some(match sum {
            Some(s) => s.add(term)?,
            None => term,
        });
    }
    let mean = sum
        .expect("non-empty layer set")
        .scale(T::one() / T::from_f64_lossy(layers.len() as f64));
    let geo_total = geo.scale(T::one() - g).add(mean.scale(g))?;
    combine(class, geo_total, l)
}
