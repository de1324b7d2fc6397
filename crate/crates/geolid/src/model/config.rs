use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One strided convolution of the waveform frontend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub frontend: Vec<ConvSpec>,
    /// Number of transformer layers `N`.
    pub layers: usize,
    /// Hidden size `D`.
    pub hidden: usize,
    pub heads: usize,
    pub feed_forward: usize,
    /// Frames beyond this cap are dropped after the frontend.
    pub max_frames: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.frontend.is_empty()
            || self
                .frontend
                .iter()
                .any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0)
        {
            return Err(Error::InvalidConfig("frontend needs positive conv specs".into()));
        }
        if self.feed_forward == 0 || self.max_frames == 0 {
            return Err(Error::InvalidConfig("feed-forward size and frame cap must be positive".into()));
        }
        Ok(())
    }

    pub fn frontend_channels(&self) -> usize {
        self.frontend.last().map_or(1, |c| c.channels)
    }

    /// Frames produced from `samples` input samples, before the cap.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        self.frontend.iter().try_fold(samples, |len, c| {
            (len >= c.kernel).then(|| (len - c.kernel) / c.stride + 1)
        })
    }

    /// Shortest waveform that yields one frame.
    pub fn min_samples(&self) -> usize {
        self.frontend
            .iter()
            .rev()
            .fold(1, |len, c| (len - 1) * c.stride + c.kernel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShareMode {
    Shared,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    Frozen,
    Trainable,
}

/// Which encoder outputs receive geolocation conditioning and how the
/// conditioning projection is parameterized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondConfig {
    /// Layer indices `n`; the signal is added to `Z^n` before layer `n + 1`.
    pub layers: BTreeSet<usize>,
    pub share: ShareMode,
    pub freeze: FreezeMode,
    pub enabled: bool,
    /// When false the intermediate prediction feeds the projection without a
    /// gradient barrier (ablation).
    pub detach: bool,
}

impl Default for CondConfig {
    fn default() -> Self {
        Self {
            layers: BTreeSet::new(),
            share: ShareMode::Shared,
            freeze: FreezeMode::Trainable,
            enabled: false,
            detach: true,
        }
    }
}

impl CondConfig {
    /// Layer set that actually receives conditioning.
    pub fn effective_layers(&self) -> BTreeSet<usize> {
        if self.enabled {
            self.layers.clone()
        } else {
            BTreeSet::new()
        }
    }

    pub fn validate(&self, encoder_layers: usize) -> Result<()> {
        if let Some(&n) = self.layers.iter().find(|&&n| n >= encoder_layers) {
            return Err(Error::InvalidConfig(format!(
                "conditioning layer {n} outside 0..{encoder_layers}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// ECAPA channel size `C`.
    pub channels: usize,
    /// Embedding dimension `E`.
    pub embed: usize,
    pub classes: usize,
    /// Geolocation vector length (lattice point count).
    pub geo_dim: usize,
    /// Sub-centers per class `K`.
    pub subcenters: usize,
    /// Additive angular margin in radians.
    pub margin: f64,
    /// Logit scale applied after the margin.
    pub scale: f64,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.embed == 0
            || self.classes == 0
            || self.geo_dim == 0
            || self.subcenters == 0
            || !(self.scale > 0.0)
        {
            return Err(Error::InvalidConfig("head sizes and scale must be positive".into()));
        }
        if self.channels % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "channel size {} must split into 4 Res2 groups",
                self.channels
            )));
        }
        if !(0.0..FRAC_PI_2).contains(&self.margin) {
            return Err(Error::InvalidConfig(format!(
                "margin {} outside [0, pi/2)",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Loss weights: `lambda` trades classification against geolocation,
/// `gamma` trades the downstream against the intermediate geolocation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
}

impl LossConfig {
    pub fn new(lambda: f64, gamma: f64) -> Result<Self> {
        let c = Self { lambda, gamma };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Classification only.
    Baseline,
    /// Adds downstream geolocation prediction.
    GeoPred,
    /// Adds intermediate prediction and conditioning.
    GeoCond,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::GeoPred => "geo-pred",
            Mode::GeoCond => "geo-cond",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "geo-pred" => Ok(Mode::GeoPred),
            "geo-cond" => Ok(Mode::GeoCond),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}`"))),
        }
    }
}

impl fmt::Display for ShareMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShareMode::Shared => "shared",
            ShareMode::Independent => "independent",
        })
    }
}

impl FromStr for ShareMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(ShareMode::Shared),
            "independent" => Ok(ShareMode::Independent),
            _ => Err(Error::InvalidArgument(format!("unknown share mode `{s}`"))),
        }
    }
}

impl fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezeMode::Frozen => "frozen",
            FreezeMode::Trainable => "trainable",
        })
    }
}

impl FromStr for FreezeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(FreezeMode::Frozen),
            "trainable" => Ok(FreezeMode::Trainable),
            _ => Err(Error::InvalidArgument(format!("unknown freeze mode `{s}`"))),
        }
    }
}

/// Named layer-selection strategies, scaled to the encoder depth. With 48
/// layers they are `{0,4,8,12}`, `{16,...,28}`, `{32,...,44}` and
/// `{0,4,...,44}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerStrategy {
    Bottom,
    Middle,
    Top,
    Full,
}

impl LayerStrategy {
    pub const ALL: [LayerStrategy; 4] = [Self::Bottom, Self::Middle, Self::Top, Self::Full];

    pub fn layers(&self, encoder_layers: usize) -> BTreeSet<usize> {
        let stride = (encoder_layers / 12).max(1);
        let full: Vec<usize> = (0..encoder_layers).step_by(stride).take(12).collect();
        let third = full.len().div_ceil(3);
        let pick = |i: usize| full.iter().skip(i * third).take(third).copied().collect();
        match self {
            Self::Bottom => pick(0),
            Self::Middle => pick(1),
            Self::Top => pick(2),
            Self::Full => full.into_iter().collect(),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Bottom => "bottom",
            Self::Middle => "middle",
            Self::Top => "top",
            Self::Full => "full",
        }
    }

    /// Short label such as `0-12`.
    pub fn label(&self, encoder_layers: usize) -> String {
        let l = self.layers(encoder_layers);
        match (l.first(), l.last()) {
            (Some(a), Some(b)) => format!("{a}-{b}"),
            _ => "none".into(),
        }
    }
}

impl FromStr for LayerStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottom" => Ok(Self::Bottom),
            "middle" => Ok(Self::Middle),
            "top" => Ok(Self::Top),
            "full" => Ok(Self::Full),
            _ => Err(Error::InvalidArgument(format!("unknown layer strategy `{s}`"))),
        }
    }
}

/// Parses `bottom|middle|top|full`, `none`, a comma list `3,4`, or ranges
/// such as `0-3,5`.
pub fn parse_layer_spec(spec: &str, encoder_layers: usize) -> Result<BTreeSet<usize>> {
    let spec = spec.trim();
    if let Ok(s) = spec.parse::<LayerStrategy>() {
        return Ok(s.layers(encoder_layers));
    }
    if spec.is_empty() || spec == "none" {
        return Ok(BTreeSet::new());
    }
    let bad = || Error::InvalidArgument(format!("bad layer spec `{spec}`"));
    let mut out = BTreeSet::new();
    for part in spec.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.insert(part.parse().map_err(|_| bad())?);
        }
    }
    Ok(out)
}

pub fn format_layer_set(layers: &BTreeSet<usize>) -> String {
    if layers.is_empty() {
        "none".into()
    } else {
        layers.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Everything needed to build a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub cond: CondConfig,
    pub mode: Mode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        self.cond.validate(self.encoder.layers)?;
        if !self.cond.detach && self.mode == Mode::Baseline {
            return Err(Error::InvalidConfig(
                "removing detach has no meaning in baseline mode".into(),
            ));
        }
        Ok(())
    }

    /// Layers that are conditioned in this mode.
    pub fn conditioned_layers(&self) -> BTreeSet<usize> {
        match self.mode {
            Mode::GeoCond => self.cond.effective_layers(),
            _ => BTreeSet::new(),
        }
    }

    /// Configuration used by gradient checks: `N=2, D=8, C=8, E=4`, six
    /// geolocation dimensions, two sub-centers, conditioning on layers 0 and 1.
    pub fn tiny(classes: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                frontend: vec![
                    ConvSpec { channels: 4, kernel: 4, stride: 2 },
                    ConvSpec { channels: 4, kernel: 2, stride: 2 },
                ],
                layers: 2,
                hidden: 8,
                heads: 2,
                feed_forward: 16,
                max_frames: 12,
            },
            head: HeadConfig {
                channels: 8,
                embed: 4,
                classes,
                geo_dim: 6,
                subcenters: 2,
                margin: 0.2,
                scale: 4.0,
            },
            cond: CondConfig {
                layers: [0, 1].into_iter().collect(),
                share: ShareMode::Shared,
                freeze: FreezeMode::Trainable,
                enabled: true,
                detach: true,
            },
            mode: Mode::GeoCond,
        }
    }

    /// Desk-scale configuration: `N=6, D=64, C=64, E=32`.
    pub fn desk(classes: usize, geo_dim: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                frontend: vec![
                    ConvSpec { channels: 32, kernel: 10, stride: 5 },
                    ConvSpec { channels: 32, kernel: 8, stride: 4 },
                    ConvSpec { channels: 32, kernel: 4, stride: 4 },
                    ConvSpec { channels: 32, kernel: 2, stride: 2 },
                ],
                layers: 6,
                hidden: 64,
                heads: 4,
                feed_forward: 128,
                max_frames: 200,
            },
            head: HeadConfig {
                channels: 64,
                embed: 32,
                classes,
                geo_dim,
                subcenters: 3,
                margin: 0.2,
                scale: 30.0,
            },
            cond: CondConfig::default(),
            mode: Mode::Baseline,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_at_48_layers() {
        let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(LayerStrategy::Bottom.layers(48), set(&[0, 4, 8, 12]));
        assert_eq!(LayerStrategy::Middle.layers(48), set(&[16, 20, 24, 28]));
        assert_eq!(LayerStrategy::Top.layers(48), set(&[32, 36, 40, 44]));
        assert_eq!(LayerStrategy::Full.layers(48), (0..48).step_by(4).collect());
        assert_eq!(LayerStrategy::Top.label(48), "32-44");
        assert_eq!(LayerStrategy::Top.layers(6), set(&[4, 5]));
        assert_eq!(LayerStrategy::Full.layers(6), (0..6).collect());
    }

    #[test]
    fn layer_spec_parsing() {
        assert_eq!(parse_layer_spec("3,4", 6).unwrap(), [3, 4].into_iter().collect());
        assert_eq!(parse_layer_spec("0-2,5", 6).unwrap(), [0, 1, 2, 5].into_iter().collect());
        assert!(parse_layer_spec("none", 6).unwrap().is_empty());
        assert_eq!(parse_layer_spec("bottom", 6).unwrap(), [0, 1].into_iter().collect());
        assert!(parse_layer_spec("x", 6).is_err());
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::tiny(3);
        c.validate().unwrap();
        c.encoder.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(3);
        c.cond.layers.insert(2);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(3);
        c.head.margin = FRAC_PI_2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(3);
        c.mode = Mode::Baseline;
        c.cond.detach = false;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        assert!(LossConfig::new(1.2, 0.0).is_err());
        LossConfig::new(0.2, 0.4).unwrap();
    }

    #[test]
    fn frontend_arithmetic() {
        let e = ModelConfig::desk(4, 8).encoder;
        assert_eq!(e.frames_for(6000), Some(37));
        let m = e.min_samples();
        assert_eq!(e.frames_for(m), Some(1));
        assert_eq!(e.frames_for(m - 1), None);
    }
}
