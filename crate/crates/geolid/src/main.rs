use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use geolid::checkpoint::{model_from_archive, Archive};
use geolid::data::{desk_languages, gen_corpus, Corpus, CorpusCounts, Split};
use geolid::eval::{ablation_grid, dump_embeddings, predict, EvalReport, GridSpec};
use geolid::geovec::{fibonacci_lattice, geo_vector, GeoCoordinate};
use geolid::model::{loss_gradcheck, LidModel, LossConfig, ModelConfig};
use geolid::train::{resume, TrainConfig, Trainer, LOG_FILE};

const META_FILE: &str = "run.meta";

#[derive(Parser, Debug)]
#[command(name = "geolid", version, about = "Geolocation-aware spoken language identification at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multilingual corpus.
    GenData(GenData),
    /// Train a model on a corpus.
    Train(TrainCmd),
    /// Evaluate a checkpoint on corpus splits.
    Eval(EvalCmd),
    /// Train and evaluate the layer/share/freeze ablation grid.
    Ablate(AblateCmd),
    /// Print the geolocation vector of a coordinate.
    Geovec(GeovecCmd),
    /// Finite-difference check of the full training loss.
    Gradcheck(GradcheckCmd),
    /// Print the version.
    Version,
}

#[derive(Args, Debug)]
struct Output {
    /// Output directory.
    #[arg(long, env = "GEOLID_OUT", default_value = "geolid-out")]
    out: PathBuf,
    /// Worker threads; 1 runs fully serially.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug)]
struct GenData {
    /// Root seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    languages: usize,
    /// Languages that get two extra dialects.
    #[arg(long, default_value_t = 4)]
    dialect_languages: usize,
    /// Train utterances per language.
    #[arg(long, default_value_t = 60)]
    train: usize,
    /// Dev utterances per language.
    #[arg(long, default_value_t = 20)]
    dev: usize,
    /// Dialect-dev utterances per extra dialect.
    #[arg(long, default_value_t = 20)]
    dialect_dev: usize,
    #[arg(long, default_value_t = 0.5)]
    min_seconds: f64,
    #[arg(long, default_value_t = 0.75)]
    max_seconds: f64,
    /// Render every utterance to `signals/<id>.f32` instead of storing seeds.
    #[arg(long)]
    store_signals: bool,
    #[command(flatten)]
    output: Output,
}

/// Training configuration: the file is applied over the defaults, then each
/// flag given overrides it.
#[derive(Args, Debug)]
struct Overrides {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed [default: config value, else 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Optimizer steps; rescales the schedule stages [default: config value, else 1500].
    #[arg(long)]
    steps: Option<u64>,
    /// [default: config value, else baseline]
    #[arg(long, value_parser = ["baseline", "geo-pred", "geo-cond"])]
    mode: Option<String>,
    /// Conditioned layers: `3,4`, `0-5`, bottom, middle, top, full or none [default: config value, else none].
    #[arg(long)]
    layers: Option<String>,
    /// [default: config value, else shared]
    #[arg(long, value_parser = ["shared", "independent"])]
    cond_share: Option<String>,
    /// [default: config value, else trainable]
    #[arg(long, value_parser = ["frozen", "trainable"])]
    cond_freeze: Option<String>,
    /// Geolocation loss weight [default: config value, else 0.2].
    #[arg(long)]
    lambda: Option<f64>,
    /// Intermediate geolocation loss share [default: config value, else 0.4].
    #[arg(long)]
    gamma: Option<f64>,
    /// Let gradients flow from the conditioning back into the intermediate heads.
    #[arg(long)]
    no_detach: bool,
}

impl Overrides {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        let flags = [
            ("steps", self.steps.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("layers", self.layers.clone()),
            ("cond_share", self.cond_share.clone()),
            ("cond_freeze", self.cond_freeze.clone()),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("detach", self.no_detach.then(|| "false".to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v).with_context(|| format!("--{}", k.replace('_', "-")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainCmd {
    /// Corpus directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Continue from `latest.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct EvalCmd {
    /// Corpus directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated splits.
    #[arg(long, default_value = "dev,dialect-dev")]
    splits: String,
    /// Also write `embeddings.ckpt` with `emb/<split>` and `label/<split>`.
    #[arg(long)]
    dump_embeddings: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct AblateCmd {
    /// Corpus directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// `full` or a comma list of bottom, middle, top, full.
    #[arg(long, default_value = "full")]
    grid: String,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct GeovecCmd {
    /// Latitude in degrees.
    #[arg(long, allow_hyphen_values = true)]
    lat: f64,
    /// Longitude in degrees.
    #[arg(long, allow_hyphen_values = true)]
    lon: f64,
    /// Lattice size.
    #[arg(long, default_value_t = geolid::geovec::STANDARD_LATTICE_SIZE)]
    points: usize,
}

#[derive(Args, Debug)]
struct GradcheckCmd {
    /// `tiny`, or a training config file whose network is checked.
    #[arg(long, default_value = "tiny")]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

/// Usage problems exit with 1, everything else with 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn runtime<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Runtime(e.into()))
}

fn sha256_hex(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes `run.meta`: the command line, effective config and seed, and the
/// checksum of every deterministic artifact (relative to `out`).
fn write_meta(
    out: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    artifacts: &[PathBuf],
    volatile: &[&str],
) -> anyhow::Result<()> {
    let mut sums = serde_json::Map::new();
    for a in artifacts {
        let rel = a.strip_prefix(out).unwrap_or(a).to_string_lossy().into_owned();
        sums.insert(rel, sha256_hex(a)?.into());
    }
    let meta = serde_json::json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "artifacts": sums,
        "unchecked": volatile,
    });
    let path = out.join(META_FILE);
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Corpus, Failure> {
    runtime(Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display())))
}

fn gen_data(a: GenData) -> Result<(), Failure> {
    let counts = CorpusCounts {
        train: a.train,
        dev: a.dev,
        dialect_dev: a.dialect_dev,
        min_seconds: a.min_seconds,
        max_seconds: a.max_seconds,
    };
    let specs = usage(desk_languages(a.languages, a.dialect_languages, a.seed).map_err(Into::into))?;
    let mut corpus = usage(gen_corpus(&specs, &counts, a.seed).map_err(Into::into))?;
    let out = &a.output.out;
    let written = runtime(corpus.write(out, a.store_signals))?;
    let config = serde_json::json!({
        "languages": a.languages,
        "dialect_languages": a.dialect_languages,
        "counts": counts,
        "store_signals": a.store_signals,
    });
    runtime(write_meta(out, "gen-data", a.seed, config, &written, &[]))?;
    println!(
        "wrote {} utterances ({} train, {} dev, {} dialect-dev) to {}",
        corpus.entries.len(),
        corpus.split(Split::Train).count(),
        corpus.split(Split::Dev).count(),
        corpus.split(Split::DialectDev).count(),
        out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainCmd) -> Result<(), Failure> {
    let out = &a.output.out;
    let corpus = load_corpus(&a.data)?;
    let outcome = if a.resume {
        runtime(resume(&corpus, out, a.output.threads))?
    } else {
        let cfg = usage(a.overrides.resolve())?;
        usage(cfg.model_config(corpus.specs.len()).map_err(Into::into))?;
        runtime(fs::create_dir_all(out))?;
        runtime(fs::write(out.join("config.txt"), cfg.to_text()))?;
        let mut t = runtime(Trainer::new(cfg, &corpus))?;
        t.threads = a.output.threads;
        runtime(t.run(out, None))?
    };
    let cfg = runtime(TrainConfig::load(&out.join("config.txt")))?;
    let mut artifacts = vec![out.join("config.txt"), outcome.latest.clone()];
    artifacts.extend(outcome.best.clone());
    runtime(write_meta(
        out,
        "train",
        cfg.seed,
        serde_json::json!({ "train": cfg.to_text(), "data": a.data }),
        &artifacts,
        &[LOG_FILE],
    ))?;
    let last = outcome.records.last();
    println!(
        "step {} loss {} best dev accuracy {}",
        outcome.step,
        last.map_or("n/a".into(), |r| format!("{:.4}", r.loss_total)),
        outcome.best_dev.map_or("n/a".into(), |d| format!("{d:.2}%"))
    );
    Ok(())
}

fn eval_cmd(a: EvalCmd) -> Result<(), Failure> {
    let splits = usage(
        a.splits
            .split(',')
            .map(|s| s.trim().parse::<Split>().map_err(anyhow::Error::from))
            .collect::<anyhow::Result<Vec<_>>>(),
    )?;
    let corpus = load_corpus(&a.data)?;
    let archive = runtime(Archive::load(&a.checkpoint))?;
    let model: LidModel<f32> = runtime(model_from_archive(&archive))?;
    if model.config.head.classes != corpus.specs.len() {
        return Err(Failure::Usage(anyhow::anyhow!(
            "checkpoint has {} classes, corpus has {} languages",
            model.config.head.classes,
            corpus.specs.len()
        )));
    }
    let mut by_split = Vec::new();
    for &s in &splits {
        let idx: Vec<usize> = (0..corpus.entries.len()).filter(|&i| corpus.entries[i].split == s).collect();
        by_split.push((s, runtime(predict(&model, &corpus, &idx, a.output.threads))?));
    }
    let report = runtime(EvalReport::from_predictions(&corpus.languages(), &by_split))?;
    let out = &a.output.out;
    runtime(fs::create_dir_all(out))?;
    let mut artifacts = vec![out.join("report.csv"), out.join("report.md")];
    runtime(fs::write(&artifacts[0], report.to_csv()))?;
    runtime(fs::write(&artifacts[1], report.to_markdown()))?;
    if a.dump_embeddings {
        let path = out.join("embeddings.ckpt");
        runtime(runtime(dump_embeddings(archive.seed, &by_split))?.save(&path))?;
        artifacts.push(path);
    }
    runtime(write_meta(
        out,
        "eval",
        archive.seed,
        serde_json::json!({ "checkpoint": a.checkpoint, "data": a.data, "splits": a.splits }),
        &artifacts,
        &[],
    ))?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn ablate_cmd(a: AblateCmd) -> Result<(), Failure> {
    let grid: GridSpec = usage(a.grid.parse().map_err(anyhow::Error::from))?;
    let cfg = usage(a.overrides.resolve())?;
    let corpus = load_corpus(&a.data)?;
    let out = &a.output.out;
    runtime(fs::create_dir_all(out))?;
    let table = runtime(ablation_grid(&cfg, &corpus, &grid, out, a.output.threads))?;
    let md = out.join("ablation.md");
    let csv = out.join("ablation.csv");
    runtime(fs::write(&md, table.to_markdown()))?;
    runtime(fs::write(&csv, table.to_csv()))?;
    runtime(write_meta(
        out,
        "ablate",
        cfg.seed,
        serde_json::json!({ "train": cfg.to_text(), "grid": a.grid, "data": a.data }),
        &[md, csv],
        &[],
    ))?;
    print!("{}", table.to_markdown());
    let failed = table.rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", table.rows.len());
    }
    Ok(())
}

fn geovec_cmd(a: GeovecCmd) -> Result<(), Failure> {
    let coord = usage(GeoCoordinate::new(a.lat, a.lon).map_err(Into::into))?;
    let lattice = usage(fibonacci_lattice(a.points).map_err(Into::into))?;
    for v in geo_vector(&coord, &lattice).values() {
        println!("{v}");
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckCmd) -> Result<(), Failure> {
    let (model, loss) = if a.config == "tiny" {
        (ModelConfig::tiny(3), usage(LossConfig::new(0.2, 0.4).map_err(Into::into))?)
    } else {
        let cfg = usage(TrainConfig::load(Path::new(&a.config)).map_err(Into::into))?;
        let m = usage(cfg.model_config(3).map_err(Into::into))?;
        (m, usage(cfg.loss().map_err(Into::into))?)
    };
    let report = runtime(loss_gradcheck(&model, &loss, a.seed, a.epsilon))?;
    println!(
        "max relative error {:.3e} over {} entries (worst: {}[{}], analytic {:.6e}, numeric {:.6e})",
        report.max_rel_error, report.checked, report.worst_param, report.worst_index, report.analytic, report.numeric
    );
    if !(report.max_rel_error <= a.tolerance) {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "gradient check failed: {:.3e} > {:.1e}",
            report.max_rel_error,
            a.tolerance
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Geovec(a) => geovec_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Version => {
            println!("geolid {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

