use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::schedule::TriStage;
use crate::error::{Error, Result};
use crate::model::{
    format_layer_set, parse_layer_spec, CondConfig, FreezeMode, LossConfig, Mode, ModelConfig, ShareMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    /// `N=6, D=64, C=64, E=32`.
    Desk,
    /// `N=2, D=8, C=8, E=4`.
    Tiny,
}

impl fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelPreset::Desk => "desk",
            ModelPreset::Tiny => "tiny",
        })
    }
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(ModelPreset::Desk),
            "tiny" => Ok(ModelPreset::Tiny),
            _ => Err(Error::InvalidConfig(format!("unknown preset `{s}` (desk, tiny)"))),
        }
    }
}

/// Everything that determines a training run besides the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: ModelPreset,
    pub lattice_points: usize,
    pub steps: u64,
    pub schedule: TriStage,
    pub accumulation: usize,
    pub batch_seconds: f64,
    pub beta_lang: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub mode: Mode,
    /// Layer set: indices (`3,4`), a range (`0-5`), a strategy name
    /// (`bottom`, `middle`, `top`, `full`) or `none`.
    pub layers: String,
    pub cond_share: ShareMode,
    pub cond_freeze: FreezeMode,
    pub detach: bool,
    pub margin: f64,
    pub scale: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
}

/// Config-file keys with their meaning.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "model size: desk | tiny"),
    ("lattice_points", "geolocation vector length (Fibonacci lattice size)"),
    ("steps", "optimizer steps; rescales warmup/hold/decay to 5%/20%/75% unless those are given"),
    ("warmup", "linear warmup steps"),
    ("hold", "constant learning-rate steps"),
    ("decay", "exponential decay steps"),
    ("lr_init", "learning rate at step 0"),
    ("lr_peak", "learning rate after warmup"),
    ("lr_final", "learning rate after decay"),
    ("accumulation", "micro-batches per optimizer step (gradients averaged)"),
    ("batch_seconds", "audio seconds per micro-batch"),
    ("beta_lang", "language upsampling exponent in [0, 1]"),
    ("lambda", "geolocation loss weight in [0, 1]"),
    ("gamma", "intermediate geolocation loss share in [0, 1]"),
    ("mode", "baseline | geo-pred | geo-cond"),
    ("layers", "conditioned layers: `3,4`, `0-5`, bottom | middle | top | full, or none"),
    ("cond_share", "shared | independent"),
    ("cond_freeze", "frozen | trainable"),
    ("detach", "true | false; false removes the gradient barrier"),
    ("margin", "additive angular margin (radians)"),
    ("scale", "logit scale"),
    ("seed", "root seed"),
    ("checkpoint_interval", "steps between checkpoints and dev evaluations"),
];

impl Default for TrainConfig {
    fn default() -> Self {
        let steps = 1500;
        Self {
            preset: ModelPreset::Desk,
            lattice_points: crate::geovec::STANDARD_LATTICE_SIZE,
            steps,
            schedule: TriStage::scaled(steps, 1.2e-3, 2e-3, 2e-4),
            accumulation: 1,
            batch_seconds: 5.0,
            beta_lang: 0.5,
            lambda: 0.2,
            gamma: 0.4,
            mode: Mode::Baseline,
            layers: "none".into(),
            cond_share: ShareMode::Shared,
            cond_freeze: FreezeMode::Trainable,
            detach: true,
            margin: 0.2,
            scale: 30.0,
            seed: 0,
            checkpoint_interval: 500,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("`{key} = {value}`: {e}")))
}

impl TrainConfig {
    /// Sets the total step count and rescales the schedule stages to it.
    pub fn with_steps(mut self, steps: u64) -> Self {
        let s = self.schedule;
        self.steps = steps;
        self.schedule = TriStage::scaled(steps, s.lr_init, s.lr_peak, s.lr_final);
        self
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => self.preset = v.parse()?,
            "lattice_points" => self.lattice_points = parse(key, v)?,
            "steps" => *self = self.clone().with_steps(parse(key, v)?),
            "warmup" => self.schedule.warmup = parse(key, v)?,
            "hold" => self.schedule.hold = parse(key, v)?,
            "decay" => self.schedule.decay = parse(key, v)?,
            "lr_init" => self.schedule.lr_init = parse(key, v)?,
            "lr_peak" => self.schedule.lr_peak = parse(key, v)?,
            "lr_final" => self.schedule.lr_final = parse(key, v)?,
            "accumulation" => self.accumulation = parse(key, v)?,
            "batch_seconds" => self.batch_seconds = parse(key, v)?,
            "beta_lang" => self.beta_lang = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "layers" => self.layers = v.to_string(),
            "cond_share" => self.cond_share = v.parse()?,
            "cond_freeze" => self.cond_freeze = v.parse()?,
            "detach" => self.detach = parse(key, v)?,
            "margin" => self.margin = parse(key, v)?,
            "scale" => self.scale = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text on top of the defaults. `#` starts a
    /// comment. `steps` is applied first so explicit stage lengths win.
    pub fn parse_text(text: &str, path: &Path) -> Result<Self> {
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let k = k.trim().to_string();
            if pairs.contains_key(&k) {
                return Err(Error::DuplicateKey { key: k, line: n + 1 });
            }
            pairs.insert(k, (n + 1, v.trim().to_string()));
        }
        let mut cfg = Self::default();
        let mut ordered: Vec<_> = pairs.into_iter().collect();
        ordered.sort_by_key(|(k, (line, _))| (k != "steps", *line));
        for (k, (line, v)) in ordered {
            cfg.set(&k, &v).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text, path)
    }

    /// Round-trips through [`TrainConfig::parse_text`].
    pub fn to_text(&self) -> String {
        let s = &self.schedule;
        let values = [
            self.preset.to_string(),
            self.lattice_points.to_string(),
            self.steps.to_string(),
            s.warmup.to_string(),
            s.hold.to_string(),
            s.decay.to_string(),
            s.lr_init.to_string(),
            s.lr_peak.to_string(),
            s.lr_final.to_string(),
            self.accumulation.to_string(),
            self.batch_seconds.to_string(),
            self.beta_lang.to_string(),
            self.lambda.to_string(),
            self.gamma.to_string(),
            self.mode.to_string(),
            self.layers.clone(),
            self.cond_share.to_string(),
            self.cond_freeze.to_string(),
            self.detach.to_string(),
            self.margin.to_string(),
            self.scale.to_string(),
            self.seed.to_string(),
            self.checkpoint_interval.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|((k, _), v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn loss(&self) -> Result<LossConfig> {
        LossConfig::new(self.lambda, self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate(self.steps)?;
        self.loss().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if self.accumulation == 0 {
            return Err(Error::InvalidConfig("accumulation must be at least 1".into()));
        }
        if !(self.batch_seconds > 0.0) {
            return Err(Error::InvalidConfig("batch_seconds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.beta_lang) {
            return Err(Error::InvalidConfig(format!("beta_lang {} outside [0, 1]", self.beta_lang)));
        }
        if self.lattice_points == 0 || self.steps == 0 || self.checkpoint_interval == 0 {
            return Err(Error::InvalidConfig(
                "lattice_points, steps and checkpoint_interval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Network configuration for `classes` languages.
    pub fn model_config(&self, classes: usize) -> Result<ModelConfig> {
        let mut m = match self.preset {
            ModelPreset::Desk => ModelConfig::desk(classes, self.lattice_points),
            ModelPreset::Tiny => {
                let mut t = ModelConfig::tiny(classes);
                t.head.geo_dim = self.lattice_points;
                t
            }
        };
        m.mode = self.mode;
        m.head.margin = self.margin;
        m.head.scale = self.scale;
        let layers = parse_layer_spec(&self.layers, m.encoder.layers)?;
        m.cond = CondConfig {
            enabled: self.mode == Mode::GeoCond && !layers.is_empty(),
            layers,
            share: self.cond_share,
            freeze: self.cond_freeze,
            detach: self.detach,
        };
        m.validate()?;
        Ok(m)
    }

    /// Short description used in reports, e.g. `geo-cond {3,4} shared+trainable`.
    pub fn label(&self, classes: usize) -> Result<String> {
        let m = self.model_config(classes)?;
        Ok(match self.mode {
            Mode::GeoCond => format!(
                "geo-cond {} {}+{}",
                format_layer_set(&m.cond.layers),
                self.cond_share,
                self.cond_freeze
            ),
            other => other.to_string(),
        })
    }
}
