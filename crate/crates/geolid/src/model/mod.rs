//! The geolocation-aware language identification network.
//!
//! Data flow for one batch:
//!
//! ```text
//! wave -> conv frontend -> X -> Z^0 -> Encoder^1 -> ... -> Encoder^N
//!                                |  (n in M)
//!                                +-> pool^n -> proj^n -> e^n -> geo^n -> v^n
//!                                                                  |
//!                                         detach -> CondProj -> c^n, added to every frame of Z^n
//! sum_n alpha^n Z^n -> ECAPA blocks -> H -> attentive pooling -> s -> projector -> e
//! e -> sub-center cosine classifier -> logits
//! e -> GeoPred -> v
//! ```

mod config;
mod forward;
mod layers;
mod loss;

use std::collections::BTreeMap;

use rand::Rng;

pub use config::{
    format_layer_set, parse_layer_spec, CondConfig, ConvSpec, EncoderConfig, FreezeMode, HeadConfig,
    LayerStrategy, LossConfig, Mode, ModelConfig, ShareMode,
};
pub use forward::{Batch, BnUpdate, ForwardTrace, Graph, Phase};
pub use loss::{aam_subcenter_loss, loss_l1, loss_l2, mse, Losses};

use crate::autodiff::{gradcheck, GradcheckReport, ParameterSet, Real, Tensor};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Momentum of the batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Added under the square root of the pooled standard deviation.
pub const POOL_EPS: f64 = 1e-8;
pub const LN_EPS: f64 = 1e-5;

/// Model parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LidModel<T> {
    pub config: ModelConfig,
    pub params: ParameterSet<T>,
    /// Running means and variances, keyed `<module>.bn.mean` / `.var`.
    pub buffers: BTreeMap<String, Tensor<T>>,
}

pub(crate) fn inter_prefix(n: usize) -> String {
    format!("inter.{n}")
}

pub(crate) fn cond_proj_prefix(share: ShareMode, n: usize) -> String {
    match share {
        ShareMode::Shared => "cond_proj.shared".into(),
        ShareMode::Independent => format!("cond_proj.{n}"),
    }
}

struct Init<T: Real> {
    seed: u64,
    params: ParameterSet<T>,
}

impl<T: Real> Init<T> {
    /// Uniform in `±1/sqrt(fan_in)`, drawn from a stream keyed by the
    /// parameter name so values do not depend on which other modules exist.
    fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = rng_for(self.seed, name);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.params.insert(name, Tensor::from_f64(shape, &data)?, true)
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f64) -> Result<()> {
        self.params
            .insert(name, Tensor::full(shape, T::from_f64_lossy(v)), true)
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> Result<()> {
        self.uniform(&format!("{prefix}.weight"), &[input, output], input)?;
        self.uniform(&format!("{prefix}.bias"), &[output], input)
    }

    fn conv(&mut self, prefix: &str, input: usize, output: usize, kernel: usize) -> Result<()> {
        self.uniform(&format!("{prefix}.weight"), &[output, input, kernel], input * kernel)?;
        self.uniform(&format!("{prefix}.bias"), &[output], input * kernel)
    }

    fn layernorm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.fill(&format!("{prefix}.gain"), &[dim], 1.0)?;
        self.fill(&format!("{prefix}.bias"), &[dim], 0.0)
    }

    fn pooling(&mut self, prefix: &str, channels: usize) -> Result<()> {
        let hidden = attention_hidden(channels);
        self.linear(&format!("{prefix}.att1"), channels, hidden)?;
        self.linear(&format!("{prefix}.att2"), hidden, channels)
    }
}

pub(crate) fn attention_hidden(channels: usize) -> usize {
    (channels / 4).max(2)
}

impl<T: Real> LidModel<T> {
    /// Builds a freshly initialized model. Parameters are a pure function of
    /// `(config, seed)`; parameters shared between modes get identical values.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::<T> {
            seed,
            params: ParameterSet::new(),
        };
        let enc = &config.encoder;
        let head = &config.head;
        let d = enc.hidden;

        let mut prev = 1;
        for (i, c) in enc.frontend.iter().enumerate() {
            init.conv(&format!("frontend.{i}"), prev, c.channels, c.kernel)?;
            prev = c.channels;
        }
        init.layernorm("feature.ln", prev)?;
        init.linear("feature.proj", prev, d)?;
        for n in 1..=enc.layers {
            let p = format!("encoder.{n}");
            init.layernorm(&format!("{p}.ln1"), d)?;
            for m in ["q", "k", "v", "o"] {
                init.linear(&format!("{p}.attn.{m}"), d, d)?;
            }
            init.layernorm(&format!("{p}.ln2"), d)?;
            init.linear(&format!("{p}.ff1"), d, enc.feed_forward)?;
            init.linear(&format!("{p}.ff2"), enc.feed_forward, d)?;
        }
        init.fill("aggregate.logits", &[enc.layers + 1], 0.0)?;

        let c = head.channels;
        init.conv("ecapa.conv0", d, c, 5)?;
        for b in 0..3 {
            let p = format!("ecapa.block{b}");
            init.conv(&format!("{p}.conv1"), c, c, 1)?;
            for i in 1..4 {
                init.conv(&format!("{p}.res2.{i}"), c / 4, c / 4, 3)?;
            }
            init.conv(&format!("{p}.conv2"), c, c, 1)?;
            init.linear(&format!("{p}.se1"), c, (c / 4).max(1))?;
            init.linear(&format!("{p}.se2"), (c / 4).max(1), c)?;
        }
        init.conv("ecapa.mfa", 3 * c, c, 1)?;
        init.pooling("pool", c)?;
        init.linear("projector", 2 * c, head.embed)?;
        init.uniform(
            "classifier.weight",
            &[head.classes * head.subcenters, head.embed],
            head.embed,
        )?;
        let mut buffers = BTreeMap::new();
        bn_buffers(&mut buffers, "projector", 2 * c);

        if config.mode != Mode::Baseline {
            init.linear("geo", head.embed, head.geo_dim)?;
        }
        let cond_layers = config.conditioned_layers();
        for &n in &cond_layers {
            let p = inter_prefix(n);
            init.pooling(&format!("{p}.pool"), d)?;
            init.linear(&format!("{p}.projector"), 2 * d, head.embed)?;
            init.linear(&format!("{p}.geo"), head.embed, head.geo_dim)?;
            bn_buffers(&mut buffers, &format!("{p}.projector"), 2 * d);
            let cp = cond_proj_prefix(config.cond.share, n);
            if init.params.get(&format!("{cp}.weight")).is_none() {
                init.linear(&cp, head.geo_dim, d)?;
            }
        }
        let mut params = init.params;
        if config.cond.freeze == FreezeMode::Frozen {
            let frozen: Vec<String> = params
                .names()
                .filter(|n| n.starts_with("cond_proj."))
                .map(str::to_string)
                .collect();
            for n in frozen {
                params.set_trainable(&n, false)?;
            }
        }
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    /// `softmax` of the aggregation logits over `Z^0..Z^N`.
    pub fn aggregation_weights(&self) -> Result<Vec<f64>> {
        let logits = self.params.value("aggregate.logits")?.to_f64_vec();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / s).collect())
    }

    /// Folds running-statistic updates from a training forward pass.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) -> Result<()> {
        let mom = T::from_f64_lossy(BN_MOMENTUM);
        for u in updates {
            let mean_key = format!("{}.bn.mean", u.module);
            let var_key = format!("{}.bn.var", u.module);
            for (key, batch) in [(&mean_key, Some(&u.mean)), (&var_key, u.var.as_ref())] {
                let Some(batch) = batch else { continue };
                let buf = self
                    .buffers
                    .get_mut(key)
                    .ok_or_else(|| Error::NotFound(format!("buffer `{key}`")))?;
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - mom) * *r + mom * b;
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> LidModel<U> {
        LidModel {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Finite-difference check of the full training loss with respect to every
/// parameter (or a seeded sample for large models), in 64-bit, on a random
/// two-utterance batch.
pub fn loss_gradcheck(config: &ModelConfig, loss: &LossConfig, seed: u64, epsilon: f64) -> Result<GradcheckReport> {
    let m = LidModel::<f64>::new(config.clone(), seed)?;
    let mut rng = rng_for(seed, "gradcheck.batch");
    let base = config.encoder.min_samples();
    let lens = [base * 8 + 4, base * 7 + 2];
    let batch = Batch {
        waves: lens
            .iter()
            .map(|&l| (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
        labels: (0..lens.len()).map(|i| i % config.head.classes).collect(),
        targets: Some(Tensor::from_f64(
            &[lens.len(), config.head.geo_dim],
            &(0..lens.len() * config.head.geo_dim)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect::<Vec<f64>>(),
        )?),
    };
    gradcheck(
        |binder| {
            let g = Graph::new(binder, &m, Phase::Train);
            let t = g.forward(&batch)?;
            Ok(g.losses(&t, &batch, loss)?.total)
        },
        &m.params,
        epsilon,
    )
}

fn bn_buffers<T: Real>(buffers: &mut BTreeMap<String, Tensor<T>>, module: &str, dim: usize) {
    buffers.insert(format!("{module}.bn.mean"), Tensor::zeros(&[dim]));
    buffers.insert(format!("{module}.bn.var"), Tensor::full(&[dim], T::one()));
}
