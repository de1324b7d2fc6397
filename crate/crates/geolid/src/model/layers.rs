//! Building blocks shared by the encoder, the embedding extractor and the
//! intermediate heads. Every block reads its parameters from a [`Binder`]
//! under a name prefix, so the same code serves any precision.

use std::collections::BTreeMap;

use super::config::EncoderConfig;
use super::{BN_EPS, LN_EPS, POOL_EPS};
use crate::autodiff::{column_stats, Binder, Real, Tensor, Var};
use crate::error::{Error, Result};

type V<'t, T> = Var<'t, T>;

fn c<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// `x W + b` over the rows of `x`.
pub(crate) fn linear<'t, T: Real>(b: &Binder<'t, '_, T>, prefix: &str, x: V<'t, T>) -> Result<V<'t, T>> {
    x.matmul(b.param(&format!("{prefix}.weight"))?)?
        .broadcast_add(b.param(&format!("{prefix}.bias"))?)
}

pub(crate) fn conv<'t, T: Real>(
    b: &Binder<'t, '_, T>,
    prefix: &str,
    x: V<'t, T>,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<V<'t, T>> {
    x.conv1d(
        b.param(&format!("{prefix}.weight"))?,
        Some(b.param(&format!("{prefix}.bias"))?),
        stride,
        dilation,
        padding,
    )
}

pub(crate) fn layernorm<'t, T: Real>(b: &Binder<'t, '_, T>, prefix: &str, x: V<'t, T>) -> Result<V<'t, T>> {
    x.layernorm(c(LN_EPS))?
        .broadcast_mul(b.param(&format!("{prefix}.gain"))?)?
        .broadcast_add(b.param(&format!("{prefix}.bias"))?)
}

/// Strided conv stack on a raw waveform: `samples -> frames x channels`.
pub(crate) fn frontend<'t, T: Real>(
    b: &Binder<'t, '_, T>,
    cfg: &EncoderConfig,
    wave: &[T],
) -> Result<V<'t, T>> {
    let min = cfg.min_samples();
    if wave.len() < min {
        return Err(Error::InvalidInput(format!(
            "signal of {} samples is shorter than the {min}-sample receptive field",
            wave.len()
        )));
    }
    let mut x = b.tape().constant(Tensor::new(vec![wave.len(), 1], wave.to_vec())?);
    for (i, spec) in cfg.frontend.iter().enumerate() {
        x = conv(b, &format!("frontend.{i}"), x, spec.stride, 1, 0)?.gelu();
    }
    let frames = x.shape()[0];
    if frames > cfg.max_frames {
        x = x.slice(0, 0, cfg.max_frames)?;
    }
    Ok(x)
}

/// Multi-head self-attention with pre-normalized input already applied.
fn attention<'t, T: Real>(b: &Binder<'t, '_, T>, prefix: &str, x: V<'t, T>, heads: usize) -> Result<V<'t, T>> {
    let d = x.shape()[1];
    let dh = d / heads;
    let q = linear(b, &format!("{prefix}.q"), x)?;
    let k = linear(b, &format!("{prefix}.k"), x)?;
    let v = linear(b, &format!("{prefix}.v"), x)?;
    let scale = c::<T>(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice(1, h * dh, dh)?;
        let kh = k.slice(1, h * dh, dh)?;
        let vh = v.slice(1, h * dh, dh)?;
        let att = qh.matmul(kh.transpose()?)?.scale(scale).softmax()?;
        outs.push(att.matmul(vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { Var::concat(&outs, 1)? };
    linear(b, &format!("{prefix}.o"), cat)
}

/// Pre-norm transformer layer.
pub(crate) fn encoder_layer<'t, T: Real>(
    b: &Binder<'t, '_, T>,
    n: usize,
    x: V<'t, T>,
    heads: usize,
) -> Result<V<'t, T>> {
    let p = format!("encoder.{n}");
    let h = layernorm(b, &format!("{p}.ln1"), x)?;
    let x = x.add(attention(b, &format!("{p}.attn"), h, heads)?)?;
    let h = layernorm(b, &format!("{p}.ln2"), x)?;
    let h = linear(b, &format!("{p}.ff1"), h)?.gelu();
    x.add(linear(b, &format!("{p}.ff2"), h)?)
}

/// Squeeze-excitation Res2 block with a residual connection.
fn se_res2_block<'t, T: Real>(
    b: &Binder<'t, '_, T>,
    prefix: &str,
    x: V<'t, T>,
    dilation: usize,
) -> Result<(V<'t, T>, V<'t, T>)> {
    let ch = x.shape()[1];
    let width = ch / 4;
    let u = conv(b, &format!("{prefix}.conv1"), x, 1, 1, 0)?.relu();
    let mut parts = Vec::with_capacity(4);
    parts.push(u.slice(1, 0, width)?);
    let mut prev: Option<V<'t, T>> = None;
    for i in 1..4 {
        let xi = u.slice(1, i * width, width)?;
        let input = match prev {
            Some(p) => xi.add(p)?,
            None => xi,
        };
        let yi = conv(b, &format!("{prefix}.res2.{i}"), input, 1, dilation, dilation)?.relu();
        parts.push(yi);
        prev = Some(yi);
    }
    let u = Var::concat(&parts, 1)?;
    let u = conv(b, &format!("{prefix}.conv2"), u, 1, 1, 0)?.relu();
    let squeeze = u.mean_axis(0)?.reshape(&[1, ch])?;
    let gate = linear(b, &format!("{prefix}.se1"), squeeze)?.relu();
    let gate = linear(b, &format!("{prefix}.se2"), gate)?.sigmoid();
    Ok((x.add(u.broadcast_mul(gate)?)?, gate))
}

/// Frame-level extractor: input conv, three SE-Res2 blocks with dilations
/// 1, 2, 3, and a 1x1 conv over their concatenated outputs. Frame count is
/// preserved. The squeeze-excitation gate of each block is returned too.
pub(crate) fn ecapa_blocks<'t, T: Real>(
    b: &Binder<'t, '_, T>,
    z: V<'t, T>,
) -> Result<(V<'t, T>, Vec<V<'t, T>>)> {
    let mut x = conv(b, "ecapa.conv0", z, 1, 1, 2)?.relu();
    let mut outs = Vec::with_capacity(3);
    let mut gates = Vec::with_capacity(3);
    for (blk, dil) in [1usize, 2, 3].into_iter().enumerate() {
        let (y, gate) = se_res2_block(b, &format!("ecapa.block{blk}"), x, dil)?;
        x = y;
        outs.push(y);
        gates.push(gate);
    }
    let cat = Var::concat(&outs, 1)?;
    Ok((conv(b, "ecapa.mfa", cat, 1, 1, 0)?.relu(), gates))
}

/// Channel-wise attentive statistics pooling: per-frame attention scores
/// from a one-hidden-layer MLP, softmax over time for each channel, then the
/// weighted mean and standard deviation. Returns a `1 x 2C` row.
pub(crate) fn attentive_stat_pooling<'t, T: Real>(
    b: &Binder<'t, '_, T>,
    prefix: &str,
    h: V<'t, T>,
) -> Result<V<'t, T>> {
    let shape = h.shape();
    let ch = shape[1];
    let a = linear(b, &format!("{prefix}.att1"), h)?.tanh();
    let scores = linear(b, &format!("{prefix}.att2"), a)?;
    let w = scores.transpose()?.softmax()?.transpose()?;
    let mu = w.mul(h)?.sum_axis(0)?;
    let m2 = w.mul(h.square())?.sum_axis(0)?;
    let eps = b.tape().constant(Tensor::full(&[ch], c(POOL_EPS)));
    let sigma = m2.sub(mu.square())?.relu().add(eps)?.sqrt();
    Var::concat(&[mu, sigma], 0)?.reshape(&[1, 2 * ch])
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<T> {
    pub module: String,
    pub mean: Vec<T>,
    /// Unbiased batch variance; absent for a batch of one.
    pub var: Option<Vec<T>>,
}

/// Batch norm (no affine) followed by a linear map. In training the batch
/// statistics are used and returned as an update; otherwise the running
/// statistics in `buffers` are applied.
pub(crate) fn projector<'t, T: Real>(
    b: &Binder<'t, '_, T>,
    prefix: &str,
    s: V<'t, T>,
    training: bool,
    buffers: &BTreeMap<String, Tensor<T>>,
) -> Result<(V<'t, T>, Option<BnUpdate<T>>)> {
    let (normed, update) = if training {
        let (mean, var) = {
            let v = s.value();
            column_stats(v.data(), v.rows(), v.cols())
        };
        let rows = s.shape()[0];
        let var = (rows > 1).then(|| {
            let k = c::<T>(rows as f64 / (rows - 1) as f64);
            var.iter().map(|&v| v * k).collect()
        });
        let update = BnUpdate {
            module: prefix.to_string(),
            mean,
            var,
        };
        (s.batchnorm(c(BN_EPS))?, Some(update))
    } else {
        let get = |k: &str| {
            buffers
                .get(&format!("{prefix}.bn.{k}"))
                .ok_or_else(|| Error::NotFound(format!("buffer `{prefix}.bn.{k}`")))
        };
        let (mean, var) = (get("mean")?, get("var")?);
        let shift = Tensor::vector(mean.data().iter().map(|&m| -m).collect());
        let inv = Tensor::vector(
            var.data()
                .iter()
                .map(|&v| T::one() / (v + c(BN_EPS)).sqrt())
                .collect(),
        );
        let tape = b.tape();
        let normed = s
            .broadcast_add(tape.constant(shift))?
            .broadcast_mul(tape.constant(inv))?;
        (normed, None)
    };
    Ok((linear(b, prefix, normed)?, update))
}
