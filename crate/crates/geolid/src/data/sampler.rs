use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::corpus::ManifestEntry;
use crate::error::{Error, Result};
use crate::seed::rng_indexed;

/// Language draw probabilities `p_l ∝ count_l^beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub probabilities: Vec<f64>,
    pub beta: f64,
}

pub fn balanced_sampler(counts: &[usize], beta: f64) -> Result<SamplingPlan> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no language counts".into()));
    }
    if counts.contains(&0) {
        return Err(Error::InvalidArgument("language counts must be positive".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta {beta} outside [0, 1]")));
    }
    let w: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(beta)).collect();
    let total: f64 = w.iter().sum();
    Ok(SamplingPlan {
        probabilities: w.iter().map(|v| v / total).collect(),
        beta,
    })
}

/// Batches of manifest indices: a language is drawn from the plan, then an
/// utterance uniformly within it, until the audio budget is reached. Batch
/// `k` depends only on `(seed, k)`, so any batch can be regenerated without
/// replaying the earlier ones.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    by_language: Vec<Vec<usize>>,
    seconds: Vec<f64>,
    dist: WeightedIndex<f64>,
    budget: f64,
    seed: u64,
    next: u64,
}

impl BatchIterator {
    /// `entries` are the candidate utterances, `languages` the class order
    /// of `plan`.
    pub fn new(
        entries: &[&ManifestEntry],
        languages: &[String],
        plan: &SamplingPlan,
        batch_seconds: f64,
        seed: u64,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("empty manifest".into()));
        }
        if plan.probabilities.len() != languages.len() {
            return Err(Error::InvalidArgument(format!(
                "plan covers {} languages, expected {}",
                plan.probabilities.len(),
                languages.len()
            )));
        }
        if !(batch_seconds > 0.0) {
            return Err(Error::InvalidArgument(format!("batch budget {batch_seconds} s")));
        }
        let mut by_language = vec![Vec::new(); languages.len()];
        for (i, e) in entries.iter().enumerate() {
            let l = languages
                .iter()
                .position(|c| *c == e.lang)
                .ok_or_else(|| Error::NotFound(format!("language `{}` in plan", e.lang)))?;
            by_language[l].push(i);
        }
        let weights: Vec<f64> = plan
            .probabilities
            .iter()
            .zip(&by_language)
            .map(|(&p, u)| if u.is_empty() { 0.0 } else { p })
            .collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidArgument(format!("sampling weights: {e}")))?;
        Ok(Self {
            by_language,
            seconds: entries.iter().map(|e| e.seconds).collect(),
            dist,
            budget: batch_seconds,
            seed,
            next: 0,
        })
    }

    /// Positions into the `entries` slice given to [`BatchIterator::new`].
    pub fn batch_at(&self, step: u64) -> Vec<usize> {
        let mut rng = rng_indexed(self.seed, "batch", step);
        let mut out = Vec::new();
        let mut total = 0.0;
        while total < self.budget {
            let lang = self.dist.sample(&mut rng);
            let pool = &self.by_language[lang];
            let idx = pool[rng.gen_range(0..pool.len())];
            total += self.seconds[idx];
            out.push(idx);
        }
        out
    }

    /// Draws one language index from the plan (for frequency checks).
    pub fn draw_language<R: Rng>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }
}
