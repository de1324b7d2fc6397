use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use crate::autodiff::{Binder, Gradients, Tape, Tensor};
use crate::checkpoint::{model_from_archive, model_to_archive, Archive};
use crate::data::{balanced_sampler, BatchIterator, Corpus, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::geovec::LanguageGeoTable;
use crate::model::{Batch, Graph, LidModel, LossConfig, Phase};
use crate::seed::derive_seed;

pub const LOG_FILE: &str = "train_log.csv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_HEADER: &str = "step,lr,loss_class,loss_geo,loss_geo_inter,loss_total,secs";

/// One optimizer step. Losses are means over the accumulated micro-batches;
/// absent terms are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss_class: f64,
    pub loss_geo: Option<f64>,
    pub loss_geo_inter: Option<f64>,
    pub loss_total: f64,
    pub secs: f64,
}

impl TrainLogRecord {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.step,
            self.lr,
            self.loss_class,
            opt(self.loss_geo),
            opt(self.loss_geo_inter),
            self.loss_total,
            self.secs
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::InvalidInput(format!("log row has {} fields", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidInput(format!("bad number `{s}` in log row")))
        };
        let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad step `{}`", f[0])))?,
            lr: num(f[1])?,
            loss_class: num(f[2])?,
            loss_geo: opt(f[3])?,
            loss_geo_inter: opt(f[4])?,
            loss_total: num(f[5])?,
            secs: num(f[6])?,
        })
    }
}

/// Reads a training log, checking the header.
pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "unexpected log header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(n, l)| {
            TrainLogRecord::from_csv(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Paths and summary of a finished (or stopped) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub step: u64,
    pub latest: PathBuf,
    pub best: Option<PathBuf>,
    pub log: PathBuf,
    pub best_dev: Option<f64>,
    pub records: Vec<TrainLogRecord>,
}

/// Full training state: model, optimizer moments, step counter and the best
/// dev accuracy seen at a checkpoint.
pub struct Trainer<'c> {
    pub config: TrainConfig,
    pub model: LidModel<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
    pub best_dev: Option<f64>,
    /// Workers for dev evaluation; training itself is serial.
    pub threads: usize,
    corpus: &'c Corpus,
    table: LanguageGeoTable,
    loss: LossConfig,
    batches: BatchIterator,
    train_idx: Vec<usize>,
    waves: Vec<Vec<f32>>,
    dev_idx: Vec<usize>,
}

impl<'c> Trainer<'c> {
    pub fn new(config: TrainConfig, corpus: &'c Corpus) -> Result<Self> {
        config.validate()?;
        let model_cfg = config.model_config(corpus.specs.len())?;
        let model = LidModel::new(model_cfg, derive_seed(config.seed, "model"))?;
        let adam = Adam::new(&model.params);
        Self::assemble(config, corpus, model, adam, 0, None)
    }

    fn assemble(
        config: TrainConfig,
        corpus: &'c Corpus,
        model: LidModel<f32>,
        adam: Adam<f32>,
        step: u64,
        best_dev: Option<f64>,
    ) -> Result<Self> {
        let languages = corpus.languages();
        let train_idx: Vec<usize> = (0..corpus.entries.len())
            .filter(|&i| corpus.entries[i].split == Split::Train)
            .collect();
        if train_idx.is_empty() {
            return Err(Error::InvalidInput("corpus has no train utterances".into()));
        }
        let refs: Vec<_> = train_idx.iter().map(|&i| &corpus.entries[i]).collect();
        let counts: Vec<usize> = languages
            .iter()
            .map(|l| refs.iter().filter(|e| &e.lang == l).count().max(1))
            .collect();
        let plan = balanced_sampler(&counts, config.beta_lang)?;
        let batches = BatchIterator::new(
            &refs,
            &languages,
            &plan,
            config.batch_seconds,
            derive_seed(config.seed, "batches"),
        )?;
        let waves = refs.iter().map(|e| corpus.signal(e)).collect::<Result<Vec<_>>>()?;
        let dev_idx = (0..corpus.entries.len())
            .filter(|&i| corpus.entries[i].split == Split::Dev)
            .collect();
        Ok(Self {
            table: corpus.geo_table(config.lattice_points)?,
            loss: config.loss()?,
            config,
            model,
            adam,
            step,
            best_dev,
            threads: 1,
            corpus,
            batches,
            train_idx,
            waves,
            dev_idx,
        })
    }

    /// Restores the exact state saved by [`Trainer::to_archive`].
    pub fn from_archive(a: &Archive, corpus: &'c Corpus) -> Result<Self> {
        let extra = a
            .config
            .get("extra")
            .ok_or_else(|| Error::Archive("checkpoint has no training state".into()))?;
        let config: TrainConfig = serde_json::from_value(
            extra
                .get("train")
                .cloned()
                .ok_or_else(|| Error::Archive("checkpoint has no train config".into()))?,
        )?;
        let step = extra
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Archive("checkpoint has no step".into()))?;
        let best_dev = extra.get("best_dev").and_then(|v| v.as_f64());
        let model: LidModel<f32> = model_from_archive(a)?;
        let mut adam = Adam::new(&model.params);
        adam.t = extra
            .get("adam_t")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Archive("checkpoint has no optimizer step".into()))?;
        for (prefix, moments) in [("adam.m/", &mut adam.m), ("adam.v/", &mut adam.v)] {
            for (name, t) in moments.iter_mut() {
                let stored = a.get(&format!("{prefix}{name}"))?;
                if stored.shape() != t.shape() {
                    return Err(Error::Archive(format!("moment `{name}` has shape {:?}", stored.shape())));
                }
                *t = stored.clone();
            }
        }
        Self::assemble(config, corpus, model, adam, step, best_dev)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let extra = serde_json::json!({
            "train": self.config,
            "step": self.step,
            "adam_t": self.adam.t,
            "best_dev": self.best_dev,
        });
        let mut a = model_to_archive(&self.model, derive_seed(self.config.seed, "model"), extra)?;
        for (name, t) in &self.adam.m {
            a.insert(format!("adam.m/{name}"), t);
        }
        for (name, t) in &self.adam.v {
            a.insert(format!("adam.v/{name}"), t);
        }
        Ok(a)
    }

    /// Micro-batch `index` of the deterministic batch sequence.
    pub fn micro_batch(&self, index: u64) -> Result<Batch<f32>> {
        let picks = self.batches.batch_at(index);
        let g = self.table.dim();
        let mut targets = Vec::with_capacity(picks.len() * g);
        let mut labels = Vec::with_capacity(picks.len());
        let mut waves = Vec::with_capacity(picks.len());
        for &p in &picks {
            let e = &self.corpus.entries[self.train_idx[p]];
            let row = self
                .table
                .get(&e.lang)
                .ok_or_else(|| Error::NotFound(format!("geolocation of `{}`", e.lang)))?;
            targets.extend(row.vector.values().iter().copied());
            labels.push(self.corpus.class_of(&e.lang)?);
            waves.push(self.waves[p].clone());
        }
        Ok(Batch {
            waves,
            labels,
            targets: Some(Tensor::from_f64(&[picks.len(), g], &targets)?),
        })
    }

    /// Forward and backward on one batch: gradients, loss values and batch
    /// norm updates (already applied to the running statistics).
    pub fn batch_gradients(&mut self, batch: &Batch<f32>) -> Result<(Gradients<f32>, [Option<f64>; 4])> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.model.params);
        let graph = Graph::new(&binder, &self.model, Phase::Train);
        let trace = graph.forward(batch)?;
        let l = graph.losses(&trace, batch, &self.loss)?;
        let total = l.total.item() as f64;
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {total} at step {}", self.step + 1)));
        }
        let inter = (!l.geo_inter.is_empty()).then(|| {
            l.geo_inter.values().map(|v| v.item() as f64).sum::<f64>() / l.geo_inter.len() as f64
        });
        let values = [
            Some(l.class.item() as f64),
            l.geo.map(|g| g.item() as f64),
            inter,
            Some(total),
        ];
        let grads = binder.backward(l.total)?;
        let updates = trace.bn_updates;
        drop(graph);
        self.model.apply_bn_updates(&updates)?;
        Ok((grads, values))
    }

    /// One optimizer step over the next `accumulation` micro-batches.
    pub fn train_step(&mut self) -> Result<TrainLogRecord> {
        let acc = self.config.accumulation as u64;
        let batches = (0..acc)
            .map(|k| self.micro_batch(self.step * acc + k))
            .collect::<Result<Vec<_>>>()?;
        self.step_on(&batches)
    }

    /// One optimizer step at the scheduled learning rate with gradients
    /// averaged over `batches`.
    pub fn step_on(&mut self, batches: &[Batch<f32>]) -> Result<TrainLogRecord> {
        if batches.is_empty() {
            return Err(Error::InvalidArgument("no micro-batches".into()));
        }
        let lr = self.config.schedule.lr(self.step);
        let n = batches.len();
        let mut sum = Gradients::zeros_like(&self.model.params);
        let mut loss_sum = [None::<f64>; 4];
        for batch in batches {
            let (g, values) = self.batch_gradients(batch)?;
            sum.add_scaled(&g, 1.0 / n as f32);
            for (s, v) in loss_sum.iter_mut().zip(values) {
                if let Some(v) = v {
                    *s = Some(s.unwrap_or(0.0) + v / n as f64);
                }
            }
        }
        self.adam.step(&mut self.model.params, &sum, lr)?;
        self.step += 1;
        Ok(TrainLogRecord {
            step: self.step,
            lr,
            loss_class: loss_sum[0].unwrap_or(0.0),
            loss_geo: loss_sum[1],
            loss_geo_inter: loss_sum[2],
            loss_total: loss_sum[3].unwrap_or(0.0),
            secs: 0.0,
        })
    }

    /// Dev-split accuracy in percent, `None` when the corpus has no dev split.
    pub fn dev_accuracy(&self) -> Result<Option<f64>> {
        if self.dev_idx.is_empty() {
            return Ok(None);
        }
        let preds = eval::predict(&self.model, self.corpus, &self.dev_idx, self.threads)?;
        let correct = preds.iter().filter(|p| p.label == p.predicted).count();
        Ok(Some(100.0 * correct as f64 / preds.len() as f64))
    }

    /// Trains until `stop_at` (capped at the configured total), writing the
    /// log and checkpoints under `out`. A resumed trainer keeps the log rows
    /// up to its step and appends from there.
    pub fn run(&mut self, out: &Path, stop_at: Option<u64>) -> Result<RunOutcome> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join(LOG_FILE);
        let mut records = if self.step == 0 {
            Vec::new()
        } else {
            let mut r = read_log(&log_path)?;
            r.retain(|x| x.step <= self.step);
            r
        };
        let mut text = format!("{LOG_HEADER}\n");
        for r in &records {
            let _ = writeln!(text, "{}", r.to_csv());
        }
        fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
        let mut log = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;

        let latest = out.join(LATEST_CHECKPOINT);
        let best = out.join(BEST_CHECKPOINT);
        let end = stop_at.unwrap_or(self.config.steps).min(self.config.steps);
        let offset = records.last().map_or(0.0, |r| r.secs);
        let start = Instant::now();
        let mut saved = false;
        while self.step < end {
            let mut rec = self.train_step()?;
            rec.secs = offset + start.elapsed().as_secs_f64();
            writeln!(log, "{}", rec.to_csv()).map_err(|e| Error::io(&log_path, e))?;
            records.push(rec);
            saved = self.step % self.config.checkpoint_interval == 0 || self.step == self.config.steps;
            if saved {
                self.checkpoint(&latest, &best)?;
            }
        }
        // Stopping between intervals saves the state for resuming without a
        // dev evaluation, so the best-checkpoint choice is unaffected.
        if !saved && (self.step > 0 || !latest.exists()) {
            self.to_archive()?.save(&latest)?;
        }
        Ok(RunOutcome {
            step: self.step,
            best: best.exists().then_some(best),
            latest,
            log: log_path,
            best_dev: self.best_dev,
            records,
        })
    }

    fn checkpoint(&mut self, latest: &Path, best: &Path) -> Result<()> {
        let dev = self.dev_accuracy()?;
        let improved = match (dev, self.best_dev) {
            (Some(d), Some(b)) => d > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.best_dev = dev;
        }
        let archive = self.to_archive()?;
        archive.save(latest)?;
        if improved || (dev.is_none() && !best.exists()) {
            archive.save(best)?;
        }
        Ok(())
    }
}

/// Trains a fresh model from `config` on `corpus`, writing under `out`.
pub fn train(config: TrainConfig, corpus: &Corpus, out: &Path, threads: usize) -> Result<RunOutcome> {
    let mut t = Trainer::new(config, corpus)?;
    t.threads = threads;
    t.run(out, None)
}

/// Continues the run whose latest checkpoint is in `out`.
pub fn resume(corpus: &Corpus, out: &Path, threads: usize) -> Result<RunOutcome> {
    let a = Archive::load(&out.join(LATEST_CHECKPOINT))?;
    let mut t = Trainer::from_archive(&a, corpus)?;
    t.threads = threads;
    t.run(out, None)
}
