use super::*;
use crate::checkpoint::Archive;
use crate::data::{desk_languages, gen_corpus, Corpus, CorpusCounts};
use crate::error::Error;
use crate::model::{FreezeMode, Mode};

fn corpus(langs: usize) -> Corpus {
    let counts = CorpusCounts {
        train: 8,
        dev: 2,
        dialect_dev: 2,
        min_seconds: 0.5,
        max_seconds: 0.6,
    };
    gen_corpus(&desk_languages(langs, 1, 4).unwrap(), &counts, 7).unwrap()
}

fn tiny(steps: u64) -> TrainConfig {
    let mut c = TrainConfig {
        preset: ModelPreset::Tiny,
        lattice_points: 8,
        batch_seconds: 2.0,
        checkpoint_interval: 5,
        seed: 3,
        ..TrainConfig::default()
    }
    .with_steps(steps);
    c.schedule.lr_init = 5e-3;
    c.schedule.lr_peak = 1e-2;
    c.schedule.lr_final = 1e-3;
    c
}

fn geo_cond(steps: u64) -> TrainConfig {
    let mut c = tiny(steps);
    c.mode = Mode::GeoCond;
    c.layers = "0,1".into();
    c
}

#[test]
fn accumulation_averages_identical_micro_batches() {
    let data = corpus(3);
    let mut one = Trainer::new(geo_cond(10), &data).unwrap();
    let mut two = Trainer::new(geo_cond(10), &data).unwrap();
    let b = one.micro_batch(0).unwrap();
    let r1 = one.step_on(std::slice::from_ref(&b)).unwrap();
    let r2 = two.step_on(&[b.clone(), b]).unwrap();
    assert!((r1.loss_total - r2.loss_total).abs() < 1e-6);
    for ((name, p), (_, q)) in one.model.params.iter().zip(two.model.params.iter()) {
        assert!(p.value.max_abs_diff(&q.value) <= 1e-6, "{name}");
    }
}

#[test]
fn resume_continues_identically() {
    let data = corpus(3);
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let cfg = geo_cond(12);
    let a = train(cfg.clone(), &data, full.path(), 1).unwrap();

    let mut t = Trainer::new(cfg, &data).unwrap();
    t.run(split.path(), Some(7)).unwrap();
    let b = resume(&data, split.path(), 2).unwrap();

    let strip = |r: &[TrainLogRecord]| -> Vec<TrainLogRecord> {
        r.iter().map(|x| TrainLogRecord { secs: 0.0, ..x.clone() }).collect()
    };
    assert_eq!(b.records.len(), 12);
    assert_eq!(strip(&a.records), strip(&b.records));
    assert_eq!(strip(&read_log(&b.log).unwrap()), strip(&a.records));
    assert_eq!(std::fs::read(&a.latest).unwrap(), std::fs::read(&b.latest).unwrap());
    assert_eq!(a.best_dev, b.best_dev);
    let header = std::fs::read_to_string(&a.log).unwrap();
    assert_eq!(header.lines().next(), Some(LOG_HEADER));
}

#[test]
fn tiny_run_reduces_loss() {
    let data = corpus(4);
    let mut t = Trainer::new(geo_cond(50), &data).unwrap();
    let recs: Vec<TrainLogRecord> = (0..50).map(|_| t.train_step().unwrap()).collect();
    assert!(recs.iter().all(|r| r.loss_total.is_finite()));
    assert!(recs.iter().all(|r| r.loss_geo.is_some() && r.loss_geo_inter.is_some()));
    assert!(
        recs[49].loss_total < recs[0].loss_total,
        "{} -> {}",
        recs[0].loss_total,
        recs[49].loss_total
    );
    let alpha = t.model.aggregation_weights().unwrap();
    assert!(alpha.iter().all(|&a| a >= 0.0));
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn frozen_cond_proj_survives_training() {
    let data = corpus(3);
    let mut cfg = geo_cond(100);
    cfg.cond_freeze = FreezeMode::Frozen;
    let mut t = Trainer::new(cfg, &data).unwrap();
    let before = t.model.params.clone();
    for _ in 0..100 {
        t.train_step().unwrap();
    }
    let mut moved = 0;
    for ((name, p), (_, q)) in before.iter().zip(t.model.params.iter()) {
        if name.starts_with("cond_proj.") {
            assert!(!q.trainable);
            assert_eq!(p.value, q.value, "{name} changed");
        } else if p.value != q.value {
            moved += 1;
        }
    }
    assert!(moved > 10);
}

#[test]
fn gamma_one_silences_downstream_geo_head() {
    let data = corpus(3);
    let mut cfg = geo_cond(10);
    cfg.gamma = 1.0;
    let mut t = Trainer::new(cfg, &data).unwrap();
    let b = t.micro_batch(0).unwrap();
    let (g, _) = t.batch_gradients(&b).unwrap();
    assert_eq!(g.max_abs_with_prefix("geo."), 0.0);
    assert!(g.max_abs_with_prefix("inter.") > 0.0);
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let data = corpus(3);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny(20), &data).unwrap();
    t.run(dir.path(), Some(5)).unwrap();
    let good = std::fs::read(dir.path().join(LATEST_CHECKPOINT)).unwrap();
    let w = t.model.params.get_mut("projector.weight").unwrap();
    w.value.data_mut()[0] = f32::NAN;
    let err = t.run(dir.path(), None).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(std::fs::read(dir.path().join(LATEST_CHECKPOINT)).unwrap(), good);
    let back = Trainer::from_archive(&Archive::load(&dir.path().join(LATEST_CHECKPOINT)).unwrap(), &data).unwrap();
    assert_eq!(back.step, 5);
}

#[test]
fn log_record_round_trip() {
    let r = TrainLogRecord {
        step: 3,
        lr: 1e-3,
        loss_class: 2.5,
        loss_geo: None,
        loss_geo_inter: Some(0.125),
        loss_total: 2.5,
        secs: 1.25,
    };
    assert_eq!(TrainLogRecord::from_csv(&r.to_csv()).unwrap(), r);
    assert!(TrainLogRecord::from_csv("1,2,3").is_err());
}
