use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geovec::GeoCoordinate;
use crate::seed::rng_for;

pub const SAMPLE_RATE: u32 = 8000;
pub const MIN_SECONDS: f64 = 0.5;
pub const MAX_SECONDS: f64 = 10.0;
pub const DEFAULT_DIALECT: &str = "default";

/// A dialect scales the parent language's formants and perturbs its
/// modulation rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialectSpec {
    pub id: String,
    pub formant_shift: [f64; 3],
    /// Relative spread of the per-utterance modulation rate.
    pub modulation_jitter: f64,
}

impl DialectSpec {
    pub fn default_for(modulation_jitter: f64) -> Self {
        Self {
            id: DEFAULT_DIALECT.into(),
            formant_shift: [1.0; 3],
            modulation_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub code: String,
    /// Formant centre frequencies in Hz.
    pub formants: [f64; 3],
    /// Relative formant amplitudes; a zero silences that formant.
    pub amplitudes: [f64; 3],
    /// Amplitude-modulation rate in Hz.
    pub modulation_rate: f64,
    /// Standard deviation of the additive white noise.
    pub noise_floor: f64,
    /// Relative per-utterance jitter of each formant (speaker variation).
    pub variability: f64,
    pub coordinate: GeoCoordinate,
    /// The first entry is the default dialect.
    pub dialects: Vec<DialectSpec>,
}

impl SyntheticLanguageSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let max_shift = self
            .dialects
            .iter()
            .flat_map(|d| d.formant_shift)
            .fold(1.0, f64::max);
        let bad = |m: String| Err(Error::InvalidConfig(format!("language `{}`: {m}", self.code)));
        if self.code.is_empty() || self.code.contains([',', '#']) || self.code.trim() != self.code {
            return bad("code must be non-empty without commas, `#` or padding".into());
        }
        for &f in &self.formants {
            if !(f > 0.0 && f * max_shift * (1.0 + 3.0 * self.variability) < nyquist) {
                return bad(format!("formant {f} Hz outside (0, {nyquist}) after shifts"));
            }
        }
        if self.amplitudes.iter().any(|a| !(*a >= 0.0)) || self.amplitudes.iter().all(|a| *a == 0.0) {
            return bad("amplitudes must be non-negative and not all zero".into());
        }
        if !(self.modulation_rate > 0.0) || !(self.noise_floor >= 0.0) || !(self.variability >= 0.0) {
            return bad("modulation rate must be positive, noise and variability non-negative".into());
        }
        match self.dialects.first() {
            Some(d) if d.id == DEFAULT_DIALECT => {}
            _ => return bad(format!("first dialect must be `{DEFAULT_DIALECT}`")),
        }
        for (i, d) in self.dialects.iter().enumerate() {
            if self.dialects[..i].iter().any(|o| o.id == d.id) {
                return bad(format!("dialect `{}` listed twice", d.id));
            }
            if d.formant_shift.iter().any(|s| !(*s > 0.0)) || !(d.modulation_jitter >= 0.0) {
                return bad(format!("dialect `{}` has non-positive shifts", d.id));
            }
        }
        Ok(())
    }

    pub fn dialect(&self, id: &str) -> Result<&DialectSpec> {
        self.dialects
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::NotFound(format!("dialect `{id}` of language `{}`", self.code)))
    }
}

/// Number of samples for a duration, rounded to the nearest sample.
pub fn sample_count(seconds: f64) -> usize {
    (seconds * SAMPLE_RATE as f64).round() as usize
}

/// Formant sinusoids, amplitude-modulated at the language rate, plus white
/// noise. Random phases, amplitudes and jitters come from `seed` only, so the
/// dialect changes frequencies but never the random stream.
pub fn synth_utterance(
    spec: &SyntheticLanguageSpec,
    dialect: &str,
    seconds: f64,
    seed: u64,
) -> Result<Vec<f32>> {
    if !(MIN_SECONDS..=MAX_SECONDS).contains(&seconds) {
        return Err(Error::InvalidArgument(format!(
            "duration {seconds} s outside [{MIN_SECONDS}, {MAX_SECONDS}]"
        )));
    }
    let d = spec.dialect(dialect)?;
    let mut rng = rng_for(seed, "utterance");
    let mut tones = Vec::with_capacity(3);
    for k in 0..3 {
        let jitter = 1.0 + spec.variability * rng.gen_range(-1.0..1.0);
        let amp = spec.amplitudes[k] * rng.gen_range(0.8..1.2);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let freq = spec.formants[k] * d.formant_shift[k] * jitter;
        tones.push((2.0 * PI * freq / SAMPLE_RATE as f64, amp, phase));
    }
    let rate = spec.modulation_rate * (1.0 + d.modulation_jitter * rng.gen_range(-1.0..1.0));
    let depth = rng.gen_range(0.3..0.7);
    let mod_phase = rng.gen_range(0.0..2.0 * PI);
    let total_amp: f64 = tones.iter().map(|t| t.1).sum();
    let n = sample_count(seconds);
    let w_mod = 2.0 * PI * rate / SAMPLE_RATE as f64;
    let out = (0..n)
        .map(|i| {
            let t = i as f64;
            let carrier: f64 = tones.iter().map(|(w, a, p)| a * (w * t + p).sin()).sum();
            let envelope = 1.0 + depth * (w_mod * t + mod_phase).sin();
            let noise: f64 = rng.sample(StandardNormal);
            (carrier * envelope / total_amp + spec.noise_floor * noise) as f32
        })
        .collect();
    Ok(out)
}

/// Language inventory for desk experiments. Formants vary smoothly with the
/// coordinate (plus a per-language offset), so nearby languages sound alike.
/// The first `with_dialects` languages get two extra dialects each.
pub fn desk_languages(count: usize, with_dialects: usize, seed: u64) -> Result<Vec<SyntheticLanguageSpec>> {
    if count < 2 || with_dialects > count {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 languages and at most {count} with dialects"
        )));
    }
    let mut rng = rng_for(seed, "languages");
    let mut coords: Vec<GeoCoordinate> = Vec::with_capacity(count);
    while coords.len() < count {
        let lat: f64 = rng.gen_range(-55.0..65.0);
        let lon: f64 = rng.gen_range(-179.0..180.0);
        let c = GeoCoordinate::new(lat, lon)?;
        if coords
            .iter()
            .all(|o| crate::geovec::great_circle_distance(o, &c) > 0.25)
        {
            coords.push(c);
        }
    }
    let specs = coords
        .into_iter()
        .enumerate()
        .map(|(i, coordinate)| {
            let lat = (coordinate.latitude_deg() + 55.0) / 120.0;
            let lon = (coordinate.longitude_deg() + 180.0) / 360.0;
            let formants = [
                300.0 + 500.0 * lat + rng.gen_range(-60.0..60.0),
                1000.0 + 1100.0 * lon + rng.gen_range(-80.0..80.0),
                2300.0 + 700.0 * (1.0 - lat) + rng.gen_range(-100.0..100.0),
            ];
            let jitter = 0.05;
            let mut dialects = vec![DialectSpec::default_for(jitter)];
            if i < with_dialects {
                for d in 0..2 {
                    let mut shift = [0.0; 3];
                    for s in &mut shift {
                        let mag = rng.gen_range(0.04..0.09);
                        *s = if rng.gen_bool(0.5) { 1.0 + mag } else { 1.0 - mag };
                    }
                    dialects.push(DialectSpec {
                        id: format!("d{}", d + 1),
                        formant_shift: shift,
                        modulation_jitter: 0.2,
                    });
                }
            }
            SyntheticLanguageSpec {
                code: format!("l{i:02}"),
                formants,
                amplitudes: [1.0, 0.7, 0.45],
                modulation_rate: rng.gen_range(2.0..8.0),
                noise_floor: 0.15,
                variability: 0.03,
                coordinate,
                dialects,
            }
        })
        .collect();
    Ok(specs)
}
