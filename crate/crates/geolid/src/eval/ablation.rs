use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::metrics::evaluate;
use crate::checkpoint::{model_from_archive, Archive};
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{FreezeMode, LayerStrategy, LidModel, Mode, ShareMode};
use crate::train::{train, TrainConfig};

/// Layer-selection strategies to cross with sharing and freezing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub strategies: Vec<LayerStrategy>,
}

impl GridSpec {
    pub fn full() -> Self {
        Self {
            strategies: LayerStrategy::ALL.to_vec(),
        }
    }

    /// Rows produced: baseline, geo-pred, then four per strategy.
    pub fn rows(&self) -> usize {
        2 + 4 * self.strategies.len()
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// `full`, or a comma list of strategies such as `bottom,top`.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "full" {
            return Ok(Self::full());
        }
        let strategies = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<Vec<LayerStrategy>>>()?;
        if strategies.is_empty() {
            return Err(Error::InvalidArgument("empty grid".into()));
        }
        Ok(Self { strategies })
    }
}

/// Accuracies of one trained configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub dev: Option<f64>,
    pub dialect_dev: Option<f64>,
    pub macro_average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub result: std::result::Result<AblationCell, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn grid_configs(base: &TrainConfig, grid: &GridSpec) -> Vec<TrainConfig> {
    let mut out = Vec::with_capacity(grid.rows());
    let mut baseline = base.clone();
    baseline.mode = Mode::Baseline;
    baseline.layers = "none".into();
    baseline.detach = true;
    out.push(baseline);
    let mut pred = base.clone();
    pred.mode = Mode::GeoPred;
    pred.layers = "none".into();
    out.push(pred);
    for s in &grid.strategies {
        for share in [ShareMode::Shared, ShareMode::Independent] {
            for freeze in [FreezeMode::Frozen, FreezeMode::Trainable] {
                let mut c = base.clone();
                c.mode = Mode::GeoCond;
                c.layers = s.as_str().to_string();
                c.cond_share = share;
                c.cond_freeze = freeze;
                out.push(c);
            }
        }
    }
    out
}

fn run_cell(cfg: &TrainConfig, corpus: &Corpus, dir: &Path) -> Result<AblationCell> {
    let outcome = train(cfg.clone(), corpus, dir, 1)?;
    let ckpt = outcome.best.unwrap_or(outcome.latest);
    let model: LidModel<f32> = model_from_archive(&Archive::load(&ckpt)?)?;
    let report = evaluate(&model, corpus, &[Split::Dev, Split::DialectDev], 1)?;
    Ok(AblationCell {
        dev: report.accuracy(Split::Dev),
        dialect_dev: report.accuracy(Split::DialectDev),
        macro_average: report.macro_average,
    })
}

/// Trains every configuration of the grid with the same seed and data and
/// evaluates its best-dev checkpoint. Cells run on up to `threads` workers;
/// a failing cell is recorded and the rest continue.
pub fn ablation_grid(
    base: &TrainConfig,
    corpus: &Corpus,
    grid: &GridSpec,
    out: &Path,
    threads: usize,
) -> Result<AblationTable> {
    let configs = grid_configs(base, grid);
    let classes = corpus.specs.len();
    let labels: Vec<String> = configs
        .iter()
        .map(|c| c.label(classes).unwrap_or_else(|e| format!("invalid ({e})")))
        .collect();
    let results: Mutex<Vec<Option<std::result::Result<AblationCell, String>>>> =
        Mutex::new(vec![None; configs.len()]);
    let next = AtomicUsize::new(0);
    let dirs: Vec<PathBuf> = (0..configs.len()).map(|i| out.join(format!("cell-{i:02}"))).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, configs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let r = run_cell(&configs[i], corpus, &dirs[i]).map_err(|e| e.to_string());
                results.lock().expect("no poisoned lock")[i] = Some(r);
            });
        }
    });
    let rows = labels
        .into_iter()
        .zip(results.into_inner().expect("no poisoned lock"))
        .map(|(label, r)| AblationRow {
            label,
            result: r.unwrap_or_else(|| Err("not run".into())),
        })
        .collect();
    Ok(AblationTable { rows })
}

impl AblationTable {
    fn columns(c: &AblationCell) -> [Option<f64>; 3] {
        [c.dev, c.dialect_dev, c.macro_average]
    }

    fn best(&self) -> [Option<f64>; 3] {
        let mut best = [None::<f64>; 3];
        for r in &self.rows {
            if let Ok(c) = &r.result {
                for (b, v) in best.iter_mut().zip(Self::columns(c)) {
                    if let Some(v) = v {
                        *b = Some(b.map_or(v, |x| x.max(v)));
                    }
                }
            }
        }
        best
    }

    /// One row per configuration; the best value of each column is bold.
    pub fn to_markdown(&self) -> String {
        let best = self.best();
        let mut out = String::from("| # | configuration | dev | dialect-dev | macro avg |\n|---:|---|---:|---:|---:|\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(out, "| {} | {} |", i + 1, r.label);
            match &r.result {
                Ok(c) => {
                    for (v, b) in Self::columns(c).into_iter().zip(best) {
                        match v {
                            Some(v) if Some(v) == b => {
                                let _ = write!(out, " **{v:.2}** |");
                            }
                            Some(v) => {
                                let _ = write!(out, " {v:.2} |");
                            }
                            None => out.push_str(" n/a |"),
                        }
                    }
                }
                Err(e) => {
                    let _ = write!(out, " failed: {} | | |", e.replace('|', "/"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        let mut out = String::from("configuration,dev,dialect_dev,macro_average,status\n");
        for r in &self.rows {
            match &r.result {
                Ok(c) => {
                    let _ = writeln!(
                        out,
                        "\"{}\",{},{},{},ok",
                        r.label,
                        fmt(c.dev),
                        fmt(c.dialect_dev),
                        fmt(c.macro_average)
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "\"{}\",,,,\"failed: {}\"", r.label, e.replace('"', "'"));
                }
            }
        }
        out
    }
}
