//! Synthetic multilingual corpus: formant-based "languages" with dialect
//! variants, a line-delimited manifest, and balanced batch sampling.

mod corpus;
mod sampler;
mod synth;

pub use corpus::{
    gen_corpus, read_signal, write_signal, Corpus, CorpusCounts, ManifestEntry, Source, Split, LANGUAGES_FILE,
    MANIFEST_FILE, SIGNAL_DIR, SPECS_FILE,
};
pub use sampler::{balanced_sampler, BatchIterator, SamplingPlan};
pub use synth::{
    desk_languages, sample_count, synth_utterance, DialectSpec, SyntheticLanguageSpec, DEFAULT_DIALECT,
    MAX_SECONDS, MIN_SECONDS, SAMPLE_RATE,
};

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::error::Error;
    use crate::seed::rng_for;

    fn counts(train: usize) -> CorpusCounts {
        CorpusCounts {
            train,
            dev: 5,
            dialect_dev: 4,
            min_seconds: 0.5,
            max_seconds: 0.75,
        }
    }

    fn corpus() -> Corpus {
        gen_corpus(&desk_languages(12, 4, 3).unwrap(), &counts(50), 11).unwrap()
    }

    #[test]
    fn manifest_counts_and_dialect_rules() {
        let c = corpus();
        assert_eq!(c.split(Split::Train).count(), 600);
        assert_eq!(c.split(Split::Dev).count(), 60);
        assert_eq!(c.split(Split::DialectDev).count(), 4 * 2 * 4);
        let train_langs: HashSet<_> = c.split(Split::Train).map(|e| e.lang.as_str()).collect();
        let train_ids: HashSet<_> = c.split(Split::Train).map(|e| e.id.as_str()).collect();
        for e in c.split(Split::DialectDev) {
            assert!(train_langs.contains(e.lang.as_str()));
            assert!(!train_ids.contains(e.id.as_str()));
            assert_ne!(e.dialect, DEFAULT_DIALECT);
        }
        let dialects: HashSet<_> = c.split(Split::Train).map(|e| (e.lang.as_str(), e.dialect.as_str())).collect();
        assert_eq!(dialects.len(), 12 + 4 * 2);
        assert!(c.entries.iter().all(|e| (0.5..=0.75).contains(&e.seconds)));
        assert_eq!(c, corpus());
    }

    #[test]
    fn targets_are_language_level() {
        let c = corpus();
        let table = c.geo_table(64).unwrap();
        for e in c.split(Split::DialectDev) {
            let v = table.get(&e.lang).unwrap();
            assert_eq!(v.vector.len(), 64);
            assert_eq!(table.index_of(&e.lang).unwrap(), c.class_of(&e.lang).unwrap());
        }
    }

    #[test]
    fn corpus_validation() {
        let specs = desk_languages(3, 0, 1).unwrap();
        assert!(matches!(gen_corpus(&specs[..1], &counts(1), 0), Err(Error::InvalidConfig(_))));
        let mut clash = specs.clone();
        clash[1].coordinate = clash[0].coordinate;
        assert!(matches!(gen_corpus(&clash, &counts(1), 0), Err(Error::InvalidConfig(_))));
        let mut bad = counts(1);
        bad.min_seconds = 0.1;
        assert!(gen_corpus(&specs, &bad, 0).is_err());
    }

    #[test]
    fn write_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = gen_corpus(&desk_languages(3, 1, 2).unwrap(), &counts(2), 5).unwrap();
        let inline: Vec<Vec<f32>> = c.entries.iter().map(|e| c.signal(e).unwrap()).collect();
        c.write(dir.path(), true).unwrap();
        let loaded = Corpus::load(dir.path()).unwrap();
        assert_eq!(loaded.entries, c.entries);
        assert!(matches!(loaded.entries[0].source, Source::Path(_)));
        for (e, want) in loaded.entries.iter().zip(&inline) {
            assert_eq!(&loaded.signal(e).unwrap(), want);
            assert_eq!(want.len(), sample_count(e.seconds));
        }
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 6);
        let table = crate::geovec::load_language_geolocations(dir.path().join(LANGUAGES_FILE), crate::geovec::fibonacci_lattice(8).unwrap()).unwrap();
        assert_eq!(table.len(), 3);

        std::fs::write(dir.path().join(MANIFEST_FILE), "{\"id\":1}\n").unwrap();
        assert!(matches!(Corpus::load(dir.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn sampler_probabilities() {
        let p = balanced_sampler(&[4, 1], 0.5).unwrap();
        assert_eq!(p.probabilities, vec![2.0 / 3.0, 1.0 / 3.0]);
        let p = balanced_sampler(&[6, 3, 1], 1.0).unwrap();
        assert!((p.probabilities[0] - 0.6).abs() < 1e-15);
        let p = balanced_sampler(&[6, 3, 1], 0.0).unwrap();
        assert!(p.probabilities.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!(matches!(balanced_sampler(&[], 0.5), Err(Error::InvalidArgument(_))));
        assert!(balanced_sampler(&[1, 2], 1.5).is_err());
    }

    fn entries(n_a: usize, n_b: usize, seconds: f64) -> Vec<ManifestEntry> {
        (0..n_a + n_b)
            .map(|i| ManifestEntry {
                id: format!("u{i}"),
                lang: if i < n_a { "a" } else { "b" }.into(),
                dialect: DEFAULT_DIALECT.into(),
                split: Split::Train,
                seconds,
                source: Source::Seed(i as u64),
            })
            .collect()
    }

    #[test]
    fn batches_fill_the_budget() {
        let es = entries(40, 10, 3.0);
        let refs: Vec<&ManifestEntry> = es.iter().collect();
        let langs = vec!["a".to_string(), "b".to_string()];
        let plan = balanced_sampler(&[40, 10], 0.5).unwrap();
        let it = BatchIterator::new(&refs, &langs, &plan, 180.0, 9).unwrap();
        assert_eq!(it.batch_at(0).len(), 60);
        let a: Vec<_> = it.clone().take(5).collect();
        let b: Vec<_> = BatchIterator::new(&refs, &langs, &plan, 180.0, 9).unwrap().take(5).collect();
        assert_eq!(a, b);
        assert_eq!(a[3], it.batch_at(3));
        assert!(BatchIterator::new(&[], &langs, &plan, 180.0, 9).is_err());
    }

    #[test]
    fn empirical_frequencies_follow_plan() {
        let es = entries(40, 10, 1.0);
        let refs: Vec<&ManifestEntry> = es.iter().collect();
        let langs = vec!["a".to_string(), "b".to_string()];
        let plan = balanced_sampler(&[40, 10], 0.5).unwrap();
        let it = BatchIterator::new(&refs, &langs, &plan, 1.0, 2).unwrap();
        let mut rng = rng_for(4, "freq");
        let mut hits = [0usize; 2];
        for _ in 0..10_000 {
            hits[it.draw_language(&mut rng)] += 1;
        }
        for (h, p) in hits.iter().zip(&plan.probabilities) {
            assert!((*h as f64 / 10_000.0 - p).abs() < 0.02);
        }
        let from_batches = (0..10_000u64)
            .filter(|&s| es[it.batch_at(s)[0]].lang == "a")
            .count();
        assert!((from_batches as f64 / 10_000.0 - plan.probabilities[0]).abs() < 0.02);
    }
}
