use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use super::config::{LossConfig, Mode};
use super::layers::{self, linear};
pub use super::layers::BnUpdate;
use super::loss::{aam_subcenter_loss, loss_l1, loss_l2, mse, Losses};
use super::{cond_proj_prefix, inter_prefix, LidModel};
use crate::autodiff::{Binder, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Training uses batch statistics in every batch norm and reports running
/// statistic updates; evaluation uses the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Waveforms with their class indices and geolocation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub waves: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    /// `batch x geo_dim`; required by the geolocation losses.
    pub targets: Option<Tensor<T>>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }
}

/// All activations of one forward pass.
pub struct ForwardTrace<'t, T> {
    /// `hidden[b][n]` is the state of utterance `b` after layer `n` as seen by
    /// layer `n + 1` and the aggregation, i.e. conditioned where `n` is in `M`.
    pub hidden: Vec<Vec<Var<'t, T>>>,
    /// Unconditioned `Z^n` for conditioned layers, per utterance.
    pub pre_injection: BTreeMap<usize, Vec<Var<'t, T>>>,
    /// `c^n`, one row per utterance.
    pub cond: BTreeMap<usize, Var<'t, T>>,
    pub z_out: Vec<Var<'t, T>>,
    pub frames: Vec<Var<'t, T>>,
    /// Pooled statistics, `batch x 2C`.
    pub pooled: Var<'t, T>,
    pub embedding: Var<'t, T>,
    pub inter_embedding: BTreeMap<usize, Var<'t, T>>,
    pub inter_geo: BTreeMap<usize, Var<'t, T>>,
    pub geo: Option<Var<'t, T>>,
    /// Margin-free max-over-sub-center cosines, `batch x classes`.
    pub cosines: Var<'t, T>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Binds a model's parameters to a tape and exposes each stage of the
/// network.
pub struct Graph<'t, 'm, T: Real> {
    binder: &'m Binder<'t, 'm, T>,
    model: &'m LidModel<T>,
    phase: Phase,
    updates: RefCell<Vec<BnUpdate<T>>>,
}

impl<'t, 'm, T: Real> Graph<'t, 'm, T> {
    /// Uses `binder` for parameters (normally bound to `model.params`) and
    /// `model` for the configuration and running statistics.
    pub fn new(binder: &'m Binder<'t, 'm, T>, model: &'m LidModel<T>, phase: Phase) -> Self {
        Self {
            binder,
            model,
            phase,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn binder(&self) -> &'m Binder<'t, 'm, T> {
        self.binder
    }

    pub fn model(&self) -> &'m LidModel<T> {
        self.model
    }

    /// Waveform to `frames x D_in` features.
    pub fn frontend(&self, wave: &[T]) -> Result<Var<'t, T>> {
        layers::frontend(self.binder, &self.model.config.encoder, wave)
    }

    /// `Z^0`: layer-normalized features projected to the hidden size.
    pub fn project_features(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = layers::layernorm(self.binder, "feature.ln", x)?;
        linear(self.binder, "feature.proj", h)
    }

    /// `Encoder^n` applied to the previous state.
    pub fn encoder_layer(&self, n: usize, z: Var<'t, T>) -> Result<Var<'t, T>> {
        layers::encoder_layer(self.binder, n, z, self.model.config.encoder.heads)
    }

    /// Adds `c` (length `D`, or `1 x D`) to every frame of `z`.
    pub fn inject(&self, z: Var<'t, T>, c: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.model.config.encoder.hidden;
        if c.value().len() != d {
            return Err(Error::shape(
                "inject",
                format!("conditioning {:?} for hidden size {d}", c.shape()),
            ));
        }
        z.broadcast_add(c)
    }

    /// Runs one utterance through the encoder with externally supplied
    /// conditioning signals. Returns `Z^0..Z^N`, conditioned where a signal
    /// is given.
    pub fn encoder_forward(
        &self,
        x: Var<'t, T>,
        cond_signals: &BTreeMap<usize, Var<'t, T>>,
    ) -> Result<Vec<Var<'t, T>>> {
        let layers = &self.model.config.encoder.layers;
        for &n in cond_signals.keys() {
            self.check_layer(n)?;
        }
        let mut z = self.project_features(x)?;
        let mut states = Vec::with_capacity(layers + 1);
        for n in 0..=*layers {
            if n > 0 {
                z = self.encoder_layer(n, z)?;
            }
            if let Some(c) = cond_signals.get(&n) {
                z = self.inject(z, *c)?;
            }
            states.push(z);
        }
        Ok(states)
    }

    /// `sum_n softmax(logits)_n * hidden_n`.
    pub fn weighted_sum(&self, hidden: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let logits = self.binder.param("aggregate.logits")?;
        if logits.value().len() != hidden.len() {
            return Err(Error::shape(
                "weighted-sum",
                format!("{} weights for {} states", logits.value().len(), hidden.len()),
            ));
        }
        let alpha = logits.softmax()?;
        let mut acc: Option<Var<'t, T>> = None;
        for (n, h) in hidden.iter().enumerate() {
            let a = alpha.slice(0, n, 1)?;
            let len = h.value().len();
            let term = h.reshape(&[len, 1])?.matmul(a.reshape(&[1, 1])?)?.reshape(&h.shape())?;
            acc = Some(match acc {
                Some(s) => s.add(term)?,
                None => term,
            });
        }
        acc.ok_or_else(|| Error::shape("weighted-sum", "no hidden states"))
    }

    /// `H` and the per-block squeeze-excitation gates.
    pub fn ecapa_blocks(&self, z_out: Var<'t, T>) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        layers::ecapa_blocks(self.binder, z_out)
    }

    /// `1 x 2C` pooled mean and standard deviation using the module at `prefix`.
    pub fn attentive_stat_pooling(&self, prefix: &str, h: Var<'t, T>) -> Result<Var<'t, T>> {
        layers::attentive_stat_pooling(self.binder, prefix, h)
    }

    /// Batch norm and linear map; running statistics are tracked per phase.
    pub fn projector(&self, prefix: &str, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let (e, update) = layers::projector(
            self.binder,
            prefix,
            s,
            self.phase == Phase::Train,
            &self.model.buffers,
        )?;
        self.updates.borrow_mut().extend(update);
        Ok(e)
    }

    /// Margin-free cosine logits, `batch x classes`.
    pub fn cosine_logits(&self, e: Var<'t, T>) -> Result<Var<'t, T>> {
        let k = self.model.config.head.subcenters;
        let eps = T::from_f64_lossy(1e-12);
        let w = self.binder.param("classifier.weight")?.normalize_rows(eps)?;
        e.normalize_rows(eps)?.matmul(w.transpose()?)?.max_groups(k)
    }

    /// Downstream geolocation prediction (unclamped).
    pub fn geo_pred(&self, e: Var<'t, T>) -> Result<Var<'t, T>> {
        linear(self.binder, "geo", e)
    }

    fn check_layer(&self, n: usize) -> Result<()> {
        if self.model.config.conditioned_layers().contains(&n) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "layer {n} is not a conditioned layer"
            )))
        }
    }

    /// Layer-specific pooling, projector and geolocation head on `Z^n` for
    /// every utterance of a batch. Returns `(e^n, v^n)`.
    pub fn intermediate_head(
        &self,
        states: &[Var<'t, T>],
        n: usize,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check_layer(n)?;
        let p = inter_prefix(n);
        let pooled = states
            .iter()
            .map(|z| self.attentive_stat_pooling(&format!("{p}.pool"), *z))
            .collect::<Result<Vec<_>>>()?;
        let s = Var::concat(&pooled, 0)?;
        let e = self.projector(&format!("{p}.projector"), s)?;
        let v = linear(self.binder, &format!("{p}.geo"), e)?;
        Ok((e, v))
    }

    /// `c^n` from a (normally detached) intermediate prediction.
    pub fn cond_proj(&self, v_bar: Var<'t, T>, n: usize) -> Result<Var<'t, T>> {
        self.check_layer(n)?;
        linear(self.binder, &cond_proj_prefix(self.model.config.cond.share, n), v_bar)
    }

    /// Full pass over a batch. Encoder layers run in lock-step across the
    /// batch because the intermediate projectors normalize over it; for
    /// conditioned `n` (ascending), the head reads `Z^n`, its prediction is
    /// detached, projected, and added to every frame before layer `n + 1`.
    pub fn forward(&self, batch: &Batch<T>) -> Result<ForwardTrace<'t, T>> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let cfg = &self.model.config;
        let cond_layers: BTreeSet<usize> = cfg.conditioned_layers();
        let frames = batch
            .waves
            .iter()
            .map(|w| self.frontend(w))
            .collect::<Result<Vec<_>>>()?;
        let mut current = frames
            .iter()
            .map(|x| self.project_features(*x))
            .collect::<Result<Vec<_>>>()?;
        let mut hidden: Vec<Vec<Var<'t, T>>> = vec![Vec::with_capacity(cfg.encoder.layers + 1); batch.len()];
        let mut pre_injection = BTreeMap::new();
        let mut cond = BTreeMap::new();
        let mut inter_embedding = BTreeMap::new();
        let mut inter_geo = BTreeMap::new();
        for n in 0..=cfg.encoder.layers {
            if n > 0 {
                current = current
                    .iter()
                    .map(|z| self.encoder_layer(n, *z))
                    .collect::<Result<Vec<_>>>()?;
            }
            if cond_layers.contains(&n) {
                let (e_n, v_n) = self.intermediate_head(&current, n)?;
                let v_bar = if cfg.cond.detach { v_n.detach() } else { v_n };
                let c_n = self.cond_proj(v_bar, n)?;
                let conditioned = current
                    .iter()
                    .enumerate()
                    .map(|(b, z)| self.inject(*z, c_n.slice(0, b, 1)?))
                    .collect::<Result<Vec<_>>>()?;
                pre_injection.insert(n, std::mem::replace(&mut current, conditioned));
                cond.insert(n, c_n);
                inter_embedding.insert(n, e_n);
                inter_geo.insert(n, v_n);
            }
            for (b, z) in current.iter().enumerate() {
                hidden[b].push(*z);
            }
        }
        let z_out = hidden
            .iter()
            .map(|h| self.weighted_sum(h))
            .collect::<Result<Vec<_>>>()?;
        let mut frame_feats = Vec::with_capacity(batch.len());
        let mut pooled = Vec::with_capacity(batch.len());
        for z in &z_out {
            let (h, _) = self.ecapa_blocks(*z)?;
            pooled.push(self.attentive_stat_pooling("pool", h)?);
            frame_feats.push(h);
        }
        let pooled = Var::concat(&pooled, 0)?;
        let embedding = self.projector("projector", pooled)?;
        let cosines = self.cosine_logits(embedding)?;
        let geo = match cfg.mode {
            Mode::Baseline => None,
            _ => Some(self.geo_pred(embedding)?),
        };
        Ok(ForwardTrace {
            hidden,
            pre_injection,
            cond,
            z_out,
            frames: frame_feats,
            pooled,
            embedding,
            inter_embedding,
            inter_geo,
            geo,
            cosines,
            bn_updates: self.updates.borrow().clone(),
        })
    }

    /// Composite training loss for the model's mode: classification alone,
    /// `L1`, or `L2` when intermediate layers are conditioned.
    pub fn losses(
        &self,
        trace: &ForwardTrace<'t, T>,
        batch: &Batch<T>,
        weights: &LossConfig,
    ) -> Result<Losses<'t, T>> {
        let head = &self.model.config.head;
        let w = self.binder.param("classifier.weight")?;
        let (class, _) = aam_subcenter_loss(trace.embedding, w, &batch.labels, head)?;
        let Some(geo_pred) = trace.geo else {
            return Ok(Losses {
                class,
                geo: None,
                geo_inter: BTreeMap::new(),
                total: class,
            });
        };
        let targets = batch
            .targets
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("geolocation targets missing".into()))?;
        let target = self.binder.tape().constant(targets.clone());
        let geo = mse(geo_pred, target)?;
        let geo_inter = trace
            .inter_geo
            .iter()
            .map(|(&n, v)| Ok((n, mse(*v, target)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let total = if geo_inter.is_empty() {
            loss_l1(class, geo, weights.lambda)?
        } else {
            let layers: BTreeSet<usize> = geo_inter.keys().copied().collect();
            loss_l2(class, geo, &geo_inter, &layers, weights.lambda, weights.gamma)?
        };
        Ok(Losses {
            class,
            geo: Some(geo),
            geo_inter,
            total,
        })
    }
}
