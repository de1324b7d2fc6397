//! Acceptance harness. Prints one line per criterion. Every criterion except
//! the directional desk experiment also fails the process; that one is a
//! measured outcome of a small stochastic experiment and is reported as is.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use geolid::autodiff::{gradcheck_ops, Binder, Gradients, Tape, Tensor, OPS};
use geolid::checkpoint::{model_from_archive, Archive};
use geolid::data::{balanced_sampler, desk_languages, gen_corpus, Corpus, CorpusCounts, Split};
use geolid::eval::{evaluate, mean_compactness};
use geolid::geovec::{fibonacci_lattice, geo_vector, great_circle_distance, GeoCoordinate};
use geolid::model::{
    aam_subcenter_loss, loss_gradcheck, loss_l1, loss_l2, Batch, FreezeMode, Graph, HeadConfig, LidModel,
    LossConfig, Losses, Mode, ModelConfig, Phase, ShareMode,
};
use geolid::train::{train, tri_stage_lr, ModelPreset, TrainConfig, TriStage, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;
type DeskResults = BTreeMap<(u64, String), Result<DeskResult, String>>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_coordinate(r: &mut ChaCha8Rng) -> GeoCoordinate {
    let lat = r.gen::<f64>().mul_add(2.0, -1.0).asin().to_degrees();
    GeoCoordinate::new(lat, r.gen_range(-180.0..180.0)).unwrap()
}

fn angle_oracle(a: &GeoCoordinate, b: &GeoCoordinate) -> f64 {
    let (p, q) = (a.to_unit_vector(), b.to_unit_vector());
    let dot = p[0] * q[0] + p[1] * q[1] + p[2] * q[2];
    let cross = [p[1] * q[2] - p[2] * q[1], p[2] * q[0] - p[0] * q[2], p[0] * q[1] - p[1] * q[0]];
    (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt().atan2(dot)
}

fn geodesy() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (a, b) = (random_coordinate(&mut r), random_coordinate(&mut r));
        worst = worst.max((great_circle_distance(&a, &b) - angle_oracle(&a, &b)).abs());
    }
    let lattice = fibonacci_lattice(299).unwrap();
    let mut in_range = true;
    for _ in 0..1_000 {
        let v = geo_vector(&random_coordinate(&mut r), &lattice);
        in_range &= v.values().iter().all(|x| (0.0..=1.0).contains(x));
    }
    let mut special = true;
    for (lat, lon) in [(0.0, 0.0), (90.0, 0.0), (0.0, 90.0), (-45.0, 180.0)] {
        let a = GeoCoordinate::new(lat, lon).unwrap();
        let anti_lon = if lon > 0.0 { lon - 180.0 } else { lon + 180.0 };
        let b = GeoCoordinate::new(-lat, anti_lon).unwrap();
        special &= great_circle_distance(&a, &a) == 0.0;
        special &= great_circle_distance(&a, &b) == std::f64::consts::PI;
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst <= 1e-9 && in_range && special && secs < 5.0,
        format!("max |d - oracle| {worst:.2e}, range ok {in_range}, special cases exact {special}, {secs:.2}s"),
    )
}

fn gradcheck_suite() -> Outcome {
    let t0 = Instant::now();
    let ops = gradcheck_ops(1e-5).map_err(|e| e.to_string())?;
    let (worst_op, worst) = ops
        .iter()
        .map(|(n, r)| (*n, r.max_rel_error))
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let mut cfg = ModelConfig::tiny(3);
    cfg.mode = Mode::GeoCond;
    let full = loss_gradcheck(&cfg, &LossConfig::new(0.2, 0.4).unwrap(), 0, 1e-5).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    check(
        ops.len() == OPS.len() && worst <= 1e-4 && full.max_rel_error <= 1e-4 && secs < 120.0,
        format!(
            "{} ops, worst {worst_op} {worst:.2e}; full loss {:.2e} over {} entries; {secs:.1}s",
            ops.len(),
            full.max_rel_error,
            full.checked
        ),
    )
}

fn tiny_model(mode: Mode, edit: impl FnOnce(&mut ModelConfig)) -> LidModel<f64> {
    let mut cfg = ModelConfig::tiny(3);
    cfg.mode = mode;
    edit(&mut cfg);
    LidModel::new(cfg, 11).unwrap()
}

fn tiny_batch(seed: u64) -> Batch<f64> {
    let mut r = rng(seed);
    let lens = [52, 40, 46];
    Batch {
        waves: lens.iter().map(|&l| (0..l).map(|_| r.gen_range(-1.0..1.0)).collect()).collect(),
        labels: vec![0, 1, 2],
        targets: Some(Tensor::new(vec![3, 6], (0..18).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()),
    }
}

fn gradients(
    m: &LidModel<f64>,
    b: &Batch<f64>,
    pick: impl for<'t> Fn(&Losses<'t, f64>) -> geolid::autodiff::Var<'t, f64>,
) -> Gradients<f64> {
    let tape = Tape::new();
    let binder = Binder::new(&tape, &m.params);
    let g = Graph::new(&binder, m, Phase::Train);
    let trace = g.forward(b).unwrap();
    let losses = g.losses(&trace, b, &LossConfig::new(0.2, 0.4).unwrap()).unwrap();
    binder.backward(pick(&losses)).unwrap()
}

fn detach_semantics() -> Outcome {
    let b = tiny_batch(1);
    let on = tiny_model(Mode::GeoCond, |_| {});
    let closed = gradients(&on, &b, |l| l.class).max_abs_with_prefix("inter.");
    let off = tiny_model(Mode::GeoCond, |c| c.cond.detach = false);
    let open = gradients(&off, &b, |l| l.class).max_abs_with_prefix("inter.");

    // The loss of a conditioned layer never reaches the projection that
    // consumes its own prediction. With one conditioned layer, or at the
    // lowest layer of a shared projection, that is every CondProj parameter.
    let mut own = 0.0f64;
    let indep = tiny_model(Mode::GeoCond, |c| c.cond.share = ShareMode::Independent);
    for n in [0usize, 1] {
        own = own.max(gradients(&indep, &b, |l| l.geo_inter[&n]).max_abs_with_prefix(&format!("cond_proj.{n}.")));
    }
    let shared = tiny_model(Mode::GeoCond, |_| {});
    let lowest = gradients(&shared, &b, |l| l.geo_inter[&0]).max_abs_with_prefix("cond_proj.");
    let single = tiny_model(Mode::GeoCond, |c| c.cond.layers = [1].into_iter().collect());
    let alone = gradients(&single, &b, |l| l.geo_inter[&1]).max_abs_with_prefix("cond_proj.");
    check(
        closed == 0.0 && open > 1e-8 && own == 0.0 && lowest == 0.0 && alone == 0.0,
        format!(
            "class->inter max {closed:e} (detach), {open:.2e} (no detach); geo^n->CondProj^n {own:e}, \
             shared lowest {lowest:e}, single layer {alone:e}"
        ),
    )
}

fn forward_values(m: &LidModel<f64>, b: &Batch<f64>) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let binder = Binder::new(&tape, &m.params);
    let g = Graph::new(&binder, m, Phase::Train);
    let t = g.forward(b).unwrap();
    let z = t.z_out.iter().map(|z| z.value().data().to_vec()).collect();
    let geo = t.geo.map(|v| v.value().data().to_vec()).unwrap_or_default();
    let embedding = t.embedding.value().data().to_vec();
    (z, embedding, geo)
}

fn reduction_identities() -> Outcome {
    let tape = Tape::<f64>::new();
    let mut r = rng(4);
    let mut scalar = || tape.var(Tensor::scalar(r.gen_range(0.1..3.0)));
    let (lc, lg) = (scalar(), scalar());
    let inter: BTreeMap<usize, _> = [(3, scalar()), (4, scalar())].into_iter().collect();
    let layers = inter.keys().copied().collect();
    let mut bitwise = true;
    for lambda in [0.0, 0.2, 0.5, 1.0] {
        let l2 = loss_l2(lc, lg, &inter, &layers, lambda, 0.0).unwrap().item();
        bitwise &= l2.to_bits() == loss_l1(lc, lg, lambda).unwrap().item().to_bits();
    }
    bitwise &= loss_l1(lc, lg, 0.0).unwrap().item().to_bits() == lc.item().to_bits();

    let b = tiny_batch(2);
    let empty = tiny_model(Mode::GeoCond, |c| c.cond.layers.clear());
    let pred = tiny_model(Mode::GeoPred, |_| {});
    let empty_equal = forward_values(&empty, &b) == forward_values(&pred, &b);

    let mut zeroed = tiny_model(Mode::GeoCond, |_| {});
    for name in ["cond_proj.shared.weight", "cond_proj.shared.bias"] {
        let p = zeroed.params.get_mut(name).unwrap();
        p.value = Tensor::zeros(p.value.shape());
    }
    let base = tiny_model(Mode::Baseline, |_| {});
    let (za, _, _) = forward_values(&zeroed, &b);
    let (zb, _, _) = forward_values(&base, &b);
    let zero_gap = za
        .iter()
        .flatten()
        .zip(zb.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    check(
        bitwise && empty_equal && zero_gap <= 1e-12,
        format!("loss identities bitwise {bitwise}; empty layer set bitwise {empty_equal}; c=0 gap {zero_gap:e}"),
    )
}

fn aam_oracle() -> Outcome {
    let (classes, dim) = (5, 8);
    let mut head = HeadConfig {
        channels: 8,
        embed: dim,
        classes,
        geo_dim: 4,
        subcenters: 1,
        margin: 0.0,
        scale: 1.0,
    };
    let mut r = rng(5);
    let (mut worst, mut monotone) = (0.0f64, true);
    for _ in 0..100 {
        let e: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..classes * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = r.gen_range(0..classes);
        let tape = Tape::new();
        let ev = tape.var(Tensor::new(vec![1, dim], e.clone()).unwrap());
        let wv = tape.var(Tensor::new(vec![classes, dim], w.clone()).unwrap());
        head.margin = 0.0;
        let (plain, _) = aam_subcenter_loss(ev, wv, &[y], &head).unwrap();
        head.margin = 0.5;
        let (margined, _) = aam_subcenter_loss(ev, wv, &[y], &head).unwrap();

        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos: Vec<f64> = w
            .chunks(dim)
            .map(|row| row.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / (norm(row) * norm(&e)))
            .collect();
        let expected = cos.iter().map(|c| c.exp()).sum::<f64>().ln() - cos[y];
        worst = worst.max((plain.item() - expected).abs());
        monotone &= margined.item() >= plain.item();
    }
    check(
        worst <= 1e-6 && monotone,
        format!("100 cases: max |loss - oracle| {worst:.2e}; margin monotone {monotone}"),
    )
}

fn schedule_anchors() -> Outcome {
    let s = TriStage::full_scale();
    let mut worst = 0.0f64;
    for (step, want) in [(0, 6e-6), (5_000, 1e-5), (25_000, 1e-5), (100_000, 1e-6)] {
        worst = worst.max(((tri_stage_lr(step, &s) - want) / want).abs());
    }
    check(worst <= 1e-9, format!("max relative deviation {worst:.2e}"))
}

fn small_corpus() -> Corpus {
    let counts = CorpusCounts {
        train: 8,
        dev: 2,
        dialect_dev: 2,
        min_seconds: 0.5,
        max_seconds: 0.6,
    };
    gen_corpus(&desk_languages(3, 1, 4).unwrap(), &counts, 7).unwrap()
}

fn cond_proj_contracts() -> Outcome {
    let data = small_corpus();
    let mut cfg = TrainConfig {
        preset: ModelPreset::Tiny,
        lattice_points: 8,
        batch_seconds: 2.0,
        mode: Mode::GeoCond,
        layers: "0,1".into(),
        cond_share: ShareMode::Independent,
        cond_freeze: FreezeMode::Frozen,
        seed: 3,
        ..TrainConfig::default()
    }
    .with_steps(100);
    cfg.schedule.lr_peak = 1e-2;
    let mut t = Trainer::new(cfg, &data).map_err(|e| e.to_string())?;
    let before = t.model.params.clone();
    for _ in 0..100 {
        t.train_step().map_err(|e| e.to_string())?;
    }
    let mut frozen_same = true;
    let mut others_moved = 0;
    for ((name, p), (_, q)) in before.iter().zip(t.model.params.iter()) {
        if name.starts_with("cond_proj.") {
            frozen_same &= p.value.data().iter().zip(q.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        } else if p.value != q.value {
            others_moved += 1;
        }
    }

    let mut m = tiny_model(Mode::GeoCond, |_| {});
    let shared_params = m.params.iter().filter(|(n, _)| n.starts_with("cond_proj.") && n.ends_with("weight")).count();
    let b = tiny_batch(3);
    let cond = |m: &LidModel<f64>| {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &m.params);
        let g = Graph::new(&binder, m, Phase::Train);
        let t = g.forward(&b).unwrap();
        t.cond.iter().map(|(n, c)| (*n, c.value().data().to_vec())).collect::<BTreeMap<_, _>>()
    };
    let c0 = cond(&m);
    m.params.get_mut("cond_proj.shared.weight").unwrap().value.data_mut()[0] += 0.5;
    let c1 = cond(&m);
    let all_changed = c0.len() == 2 && c0.iter().all(|(n, v)| c1[n] != *v);
    check(
        frozen_same && others_moved > 10 && shared_params == 1 && all_changed,
        format!(
            "frozen bit-identical after 100 steps {frozen_same} ({others_moved} other tensors moved); \
             shared weight matrices {shared_params}; mutation changes c^n at every layer {all_changed}"
        ),
    )
}

const DESK_SEEDS: [u64; 3] = [1, 2, 3];
const DESK_STEPS: u64 = 1500;

fn desk_corpus(seed: u64) -> Corpus {
    let counts = CorpusCounts {
        train: 60,
        dev: 20,
        dialect_dev: 20,
        min_seconds: 0.5,
        max_seconds: 0.75,
    };
    gen_corpus(&desk_languages(12, 4, seed).unwrap(), &counts, seed).unwrap()
}

fn desk_config(seed: u64, mode: Mode) -> TrainConfig {
    let mut c = TrainConfig {
        lattice_points: 64,
        seed,
        mode,
        lambda: 0.2,
        gamma: 0.4,
        checkpoint_interval: DESK_STEPS / 3,
        ..TrainConfig::default()
    }
    .with_steps(DESK_STEPS);
    if mode == Mode::GeoCond {
        c.layers = "3,4".into();
        c.cond_share = ShareMode::Shared;
        c.cond_freeze = FreezeMode::Trainable;
    }
    c
}

#[derive(Debug, Clone)]
struct DeskResult {
    dialect_dev: f64,
    compactness: f64,
    latest_sha: String,
    secs: f64,
}

fn sha256(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn desk_run(corpus: &Corpus, seed: u64, mode: Mode, dir: &Path) -> Result<DeskResult, String> {
    let t0 = Instant::now();
    let out = train(desk_config(seed, mode), corpus, dir, 1).map_err(|e| e.to_string())?;
    let best = out.best.clone().ok_or("no best checkpoint")?;
    let model: LidModel<f32> =
        model_from_archive(&Archive::load(&best).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let report = evaluate(&model, corpus, &[Split::DialectDev], 1).map_err(|e| e.to_string())?;
    Ok(DeskResult {
        dialect_dev: report.accuracy(Split::DialectDev).ok_or("empty dialect-dev")?,
        compactness: mean_compactness(&report, Split::DialectDev).ok_or("no compactness")?,
        latest_sha: sha256(&out.latest),
        secs: t0.elapsed().as_secs_f64(),
    })
}

/// Runs every (seed, mode) job on a shared queue.
fn desk_experiment(root: &Path) -> DeskResults {
    let corpora: BTreeMap<u64, Corpus> = DESK_SEEDS.iter().map(|&s| (s, desk_corpus(s))).collect();
    let jobs: Vec<(u64, Mode)> =
        DESK_SEEDS.iter().flat_map(|&s| [(s, Mode::Baseline), (s, Mode::GeoCond)]).collect();
    let queue = Mutex::new(jobs.clone().into_iter());
    let results = Mutex::new(BTreeMap::new());
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let Some((seed, mode)) = queue.lock().unwrap().next() else { break };
                let dir = root.join(format!("{seed}-{mode}"));
                let r = desk_run(&corpora[&seed], seed, mode, &dir);
                results.lock().unwrap().insert((seed, mode.to_string()), r);
            });
        }
    });
    results.into_inner().unwrap()
}

fn desk_directional(results: &DeskResults) -> Outcome {
    let mut lines = Vec::new();
    let (mut base_acc, mut cond_acc, mut tighter) = (0.0, 0.0, 0);
    for &seed in &DESK_SEEDS {
        let b = results[&(seed, Mode::Baseline.to_string())].as_ref().map_err(|e| format!("seed {seed} baseline: {e}"))?;
        let c = results[&(seed, Mode::GeoCond.to_string())].as_ref().map_err(|e| format!("seed {seed} geo-cond: {e}"))?;
        base_acc += b.dialect_dev / DESK_SEEDS.len() as f64;
        cond_acc += c.dialect_dev / DESK_SEEDS.len() as f64;
        if c.compactness < b.compactness {
            tighter += 1;
        }
        lines.push(format!(
            "seed {seed}: dialect-dev {:.1} vs {:.1}, compactness {:.4} vs {:.4} ({:.0}s/{:.0}s)",
            b.dialect_dev, c.dialect_dev, b.compactness, c.compactness, b.secs, c.secs
        ));
    }
    check(
        cond_acc >= base_acc && tighter >= 2,
        format!(
            "mean dialect-dev baseline {base_acc:.2} geo-cond {cond_acc:.2}; geo-cond tighter in {tighter}/3 seeds [{}]",
            lines.join("; ")
        ),
    )
}

fn determinism(root: &Path, results: &DeskResults) -> Outcome {
    let seed = DESK_SEEDS[0];
    let first = results[&(seed, Mode::Baseline.to_string())].as_ref().map_err(|e| e.clone())?;
    let again = desk_run(&desk_corpus(seed), seed, Mode::Baseline, &root.join("repeat"))?;
    check(
        first.latest_sha == again.latest_sha,
        format!("seed {seed} baseline latest.ckpt sha256 {} vs {}", &first.latest_sha[..16], &again.latest_sha[..16]),
    )
}

fn balanced_sampling() -> Outcome {
    let plan = balanced_sampler(&[4, 1], 0.5).map_err(|e| e.to_string())?;
    let exact = plan.probabilities == [2.0 / 3.0, 1.0 / 3.0];
    let mut r = rng(10);
    let n = 10_000;
    let mut counts = [0usize; 2];
    let dist = rand::distributions::WeightedIndex::new(&plan.probabilities).unwrap();
    for _ in 0..n {
        counts[r.sample(&dist)] += 1;
    }
    let freq = [counts[0] as f64 / n as f64, counts[1] as f64 / n as f64];
    let dev = (freq[0] - 2.0 / 3.0).abs().max((freq[1] - 1.0 / 3.0).abs());
    check(
        exact && dev <= 0.02,
        format!("p = {:?}; frequencies ({:.4}, {:.4})", plan.probabilities, freq[0], freq[1]),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root: PathBuf = tmp.path().to_path_buf();
    let (mut passed, mut enforced_failures) = (0, 0);
    let mut report = |n: usize, name: &str, o: Outcome| {
        let (tag, detail) = match o {
            Ok(d) => {
                passed += 1;
                ("PASS", d)
            }
            Err(d) => {
                if n != 8 {
                    enforced_failures += 1;
                }
                ("FAIL", d)
            }
        };
        println!("criterion {n}: {tag} {name}: {detail}");
    };
    report(1, "geodesy", geodesy());
    report(2, "gradcheck", gradcheck_suite());
    report(3, "detach", detach_semantics());
    report(4, "reductions", reduction_identities());
    report(5, "aam", aam_oracle());
    report(6, "schedule", schedule_anchors());
    report(7, "cond-proj", cond_proj_contracts());
    let desk = desk_experiment(&root);
    report(8, "desk experiment", desk_directional(&desk));
    report(9, "determinism", determinism(&root, &desk));
    report(10, "sampler", balanced_sampling());
    println!("{passed}/10 criteria pass");
    if enforced_failures > 0 {
        std::process::exit(1);
    }
}
