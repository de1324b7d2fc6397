use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::autodiff::{Binder, Real, Tape, Tensor};
use crate::checkpoint::Archive;
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{Batch, Graph, LidModel, Phase};

/// One scored utterance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub lang: String,
    pub label: usize,
    pub predicted: usize,
    pub embedding: Vec<f64>,
}

/// Predicted class and embedding of one waveform: the argmax over classes of
/// the max-over-sub-center cosine, without margin or scale.
pub fn classify<T: Real>(model: &LidModel<T>, wave: &[T]) -> Result<(usize, Vec<f64>)> {
    let tape = Tape::new();
    let binder = Binder::new(&tape, &model.params);
    let graph = Graph::new(&binder, model, Phase::Eval);
    let batch = Batch {
        waves: vec![wave.to_vec()],
        labels: vec![0],
        targets: None,
    };
    let trace = graph.forward(&batch)?;
    let cos = trace.cosines.value().to_f64_vec();
    let mut best = 0;
    for (i, &c) in cos.iter().enumerate() {
        if c.is_nan() {
            return Err(Error::Numeric("NaN class score".into()));
        }
        if c > cos[best] {
            best = i;
        }
    }
    let embedding = trace.embedding.value().to_f64_vec();
    Ok((best, embedding))
}

/// Scores the given manifest entries on up to `threads` workers. The result
/// is in the order of `entries` whatever the thread count.
pub fn predict<T: Real + Send + Sync>(
    model: &LidModel<T>,
    corpus: &Corpus,
    entries: &[usize],
    threads: usize,
) -> Result<Vec<Prediction>> {
    let one = |i: usize| -> Result<Prediction> {
        let e = corpus
            .entries
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("entry {i} out of range")))?;
        let label = corpus.class_of(&e.lang)?;
        let wave: Vec<T> = corpus
            .signal(e)?
            .into_iter()
            .map(|s| T::from_f64_lossy(s as f64))
            .collect();
        let (predicted, embedding) = classify(model, &wave)?;
        Ok(Prediction {
            id: e.id.clone(),
            lang: e.lang.clone(),
            label,
            predicted,
            embedding,
        })
    };
    let threads = threads.clamp(1, entries.len().max(1));
    if threads == 1 {
        return entries.iter().map(|&i| one(i)).collect();
    }
    let mut slots: Vec<Option<Result<Prediction>>> = (0..entries.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = entries.len().div_ceil(threads);
        for (ids, out) in entries.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            let one = &one;
            s.spawn(move || {
                for (&i, slot) in ids.iter().zip(out) {
                    *slot = Some(one(i));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageAccuracy {
    pub lang: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub split: Split,
    pub total: usize,
    pub correct: usize,
    /// Percent; `None` for an empty split.
    pub accuracy: Option<f64>,
    pub per_language: Vec<LanguageAccuracy>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Compactness of one set of embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Compactness {
    pub score: f64,
    pub used: usize,
    pub zero_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompactnessRow {
    pub lang: String,
    pub split: Split,
    pub count: usize,
    pub zero_excluded: usize,
    /// `None` with fewer than two usable embeddings.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub languages: Vec<String>,
    pub splits: Vec<SplitReport>,
    /// Unweighted mean over non-empty splits.
    pub macro_average: Option<f64>,
    pub compactness: Vec<CompactnessRow>,
}

/// Mean Euclidean distance of L2-normalized embeddings to their centroid.
/// All-zero vectors cannot be normalized; they are skipped and counted.
pub fn compactness(embeddings: &[&[f64]]) -> Result<Compactness> {
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut unit = Vec::with_capacity(embeddings.len());
    let mut zero_excluded = 0;
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::InvalidArgument("embeddings differ in length".into()));
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_excluded += 1;
        } else if !norm.is_finite() {
            return Err(Error::Numeric("non-finite embedding".into()));
        } else {
            unit.push(e.iter().map(|v| v / norm).collect::<Vec<f64>>());
        }
    }
    if unit.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "compactness needs 2 non-zero embeddings, got {} ({zero_excluded} zero)",
            unit.len()
        )));
    }
    let mut centroid = vec![0.0; dim];
    for u in &unit {
        for (c, v) in centroid.iter_mut().zip(u) {
            *c += v;
        }
    }
    let n = unit.len() as f64;
    centroid.iter_mut().for_each(|c| *c /= n);
    let score = unit
        .iter()
        .map(|u| u.iter().zip(&centroid).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n;
    Ok(Compactness {
        score,
        used: unit.len(),
        zero_excluded,
    })
}

fn percent(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * correct as f64 / total as f64)
}

impl EvalReport {
    /// Builds the report from predictions per split. Predictions are sorted by
    /// utterance id first, so the manifest order does not matter.
    pub fn from_predictions(languages: &[String], by_split: &[(Split, Vec<Prediction>)]) -> Result<Self> {
        let k = languages.len();
        let mut splits = Vec::new();
        let mut compact = Vec::new();
        for (split, preds) in by_split {
            let mut preds: Vec<&Prediction> = preds.iter().collect();
            preds.sort_by(|a, b| a.id.cmp(&b.id));
            let mut confusion = vec![vec![0usize; k]; k];
            for p in &preds {
                if p.label >= k || p.predicted >= k {
                    return Err(Error::InvalidArgument(format!("class index out of range in `{}`", p.id)));
                }
                confusion[p.label][p.predicted] += 1;
            }
            let per_language: Vec<LanguageAccuracy> = languages
                .iter()
                .enumerate()
                .map(|(l, lang)| {
                    let total: usize = confusion[l].iter().sum();
                    LanguageAccuracy {
                        lang: lang.clone(),
                        total,
                        correct: confusion[l][l],
                        accuracy: percent(confusion[l][l], total),
                    }
                })
                .collect();
            let correct = (0..k).map(|l| confusion[l][l]).sum();
            splits.push(SplitReport {
                split: *split,
                total: preds.len(),
                correct,
                accuracy: percent(correct, preds.len()),
                per_language,
                confusion,
            });
            let mut grouped: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
            for p in &preds {
                grouped.entry(p.label).or_default().push(&p.embedding);
            }
            for (l, embs) in grouped {
                let c = compactness(&embs).ok();
                compact.push(CompactnessRow {
                    lang: languages[l].clone(),
                    split: *split,
                    count: embs.len(),
                    zero_excluded: c.map_or_else(
                        || embs.iter().filter(|e| e.iter().all(|&v| v == 0.0)).count(),
                        |c| c.zero_excluded,
                    ),
                    score: c.map(|c| c.score),
                });
            }
        }
        let present: Vec<f64> = splits.iter().filter_map(|s| s.accuracy).collect();
        let macro_average = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        Ok(Self {
            languages: languages.to_vec(),
            splits,
            macro_average,
            compactness: compact,
        })
    }

    pub fn split(&self, split: Split) -> Option<&SplitReport> {
        self.splits.iter().find(|s| s.split == split)
    }

    pub fn accuracy(&self, split: Split) -> Option<f64> {
        self.split(split).and_then(|s| s.accuracy)
    }

    /// `metric,split,lang,value,count` rows.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        let mut out = String::from("metric,split,lang,value,count\n");
        for s in &self.splits {
            let _ = writeln!(out, "accuracy,{},all,{},{}", s.split, fmt(s.accuracy), s.total);
            for l in &s.per_language {
                let _ = writeln!(out, "accuracy,{},{},{},{}", s.split, l.lang, fmt(l.accuracy), l.total);
            }
        }
        let _ = writeln!(out, "macro_average,all,all,{},{}", fmt(self.macro_average), self.splits.len());
        for c in &self.compactness {
            let _ = writeln!(out, "compactness,{},{},{},{}", c.split, c.lang, fmt(c.score), c.count);
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into());
        let mut out = String::from("| language |");
        for s in &self.splits {
            let _ = write!(out, " {} |", s.split);
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.splits.len()));
        out.push('\n');
        for (l, lang) in self.languages.iter().enumerate() {
            let _ = write!(out, "| {lang} |");
            for s in &self.splits {
                let _ = write!(out, " {} |", fmt(s.per_language[l].accuracy));
            }
            out.push('\n');
        }
        out.push_str("| **all** |");
        for s in &self.splits {
            let _ = write!(out, " **{}** |", fmt(s.accuracy));
        }
        let _ = writeln!(out, "\n\nMacro average: {}", fmt(self.macro_average));
        if !self.compactness.is_empty() {
            out.push_str("\n| language | split | n | zero | compactness |\n|---|---|---:|---:|---:|\n");
            for c in &self.compactness {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} |",
                    c.lang,
                    c.split,
                    c.count,
                    c.zero_excluded,
                    c.score.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
                );
            }
        }
        out
    }
}

/// Accuracy, confusion and compactness on each split.
pub fn evaluate<T: Real + Send + Sync>(
    model: &LidModel<T>,
    corpus: &Corpus,
    splits: &[Split],
    threads: usize,
) -> Result<EvalReport> {
    let mut by_split = Vec::new();
    for &split in splits {
        let idx: Vec<usize> = (0..corpus.entries.len())
            .filter(|&i| corpus.entries[i].split == split)
            .collect();
        by_split.push((split, predict(model, corpus, &idx, threads)?));
    }
    EvalReport::from_predictions(&corpus.languages(), &by_split)
}

/// Mean compactness over the languages with a score on `split`.
pub fn mean_compactness(report: &EvalReport, split: Split) -> Option<f64> {
    let scores: Vec<f64> = report
        .compactness
        .iter()
        .filter(|c| c.split == split)
        .filter_map(|c| c.score)
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Embeddings as `emb/<split>` (`n x E`) and class indices as
/// `label/<split>` (`n`), sorted by utterance id.
pub fn dump_embeddings(seed: u64, by_split: &[(Split, Vec<Prediction>)]) -> Result<Archive> {
    let mut a = Archive::new(seed, serde_json::json!({ "kind": "embeddings" }));
    for (split, preds) in by_split {
        let mut preds: Vec<&Prediction> = preds.iter().collect();
        preds.sort_by(|a, b| a.id.cmp(&b.id));
        let dim = preds.first().map_or(0, |p| p.embedding.len());
        let flat: Vec<f64> = preds.iter().flat_map(|p| p.embedding.iter().copied()).collect();
        a.insert(format!("emb/{split}"), &Tensor::<f64>::from_f64(&[preds.len(), dim], &flat)?);
        let labels: Vec<f64> = preds.iter().map(|p| p.label as f64).collect();
        a.insert(format!("label/{split}"), &Tensor::<f64>::from_f64(&[preds.len()], &labels)?);
    }
    Ok(a)
}
