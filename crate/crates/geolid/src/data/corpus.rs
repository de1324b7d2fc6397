use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synth::{sample_count, synth_utterance, SyntheticLanguageSpec, DEFAULT_DIALECT, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::geovec::{fibonacci_lattice, LanguageGeoTable};
use crate::seed::{derive_seed, rng_for};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LANGUAGES_FILE: &str = "languages.txt";
pub const SPECS_FILE: &str = "specs.json";
pub const SIGNAL_DIR: &str = "signals";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Dev,
    DialectDev,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::DialectDev];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::DialectDev => "dialect-dev",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

/// Where an utterance's samples come from: a generation seed (re-synthesized
/// from the language specs) or a raw signal file relative to the corpus root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Seed(u64),
    Path(String),
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub lang: String,
    pub dialect: String,
    pub split: Split,
    pub seconds: f64,
    pub source: Source,
}

/// Utterance counts per language and split, and the duration range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub train: usize,
    pub dev: usize,
    /// Per non-default dialect.
    pub dialect_dev: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

/// Language specs plus manifest. Signals are synthesized on demand or read
/// from the signal store when the corpus was written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub specs: Vec<SyntheticLanguageSpec>,
    pub entries: Vec<ManifestEntry>,
    root: Option<PathBuf>,
}

/// Builds the manifest for `specs`. Train utterances cycle through all
/// dialects of a language, dev uses the default dialect and dialect-dev holds
/// the other dialects only. Each
/// utterance's seed and duration derive from `(seed, id)`.
pub fn gen_corpus(specs: &[SyntheticLanguageSpec], counts: &CorpusCounts, seed: u64) -> Result<Corpus> {
    if specs.len() < 2 {
        return Err(Error::InvalidConfig("a corpus needs at least 2 languages".into()));
    }
    if !(super::synth::MIN_SECONDS..=super::synth::MAX_SECONDS).contains(&counts.min_seconds)
        || !(counts.min_seconds..=super::synth::MAX_SECONDS).contains(&counts.max_seconds)
    {
        return Err(Error::InvalidConfig(format!(
            "duration range [{}, {}] invalid",
            counts.min_seconds, counts.max_seconds
        )));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        for o in &specs[..i] {
            if o.code == s.code {
                return Err(Error::InvalidConfig(format!("language `{}` listed twice", s.code)));
            }
            if o.coordinate == s.coordinate {
                return Err(Error::InvalidConfig(format!(
                    "languages `{}` and `{}` share a coordinate",
                    o.code, s.code
                )));
            }
        }
    }
    let mut entries = Vec::new();
    let mut push = |lang: &str, dialect: &str, split: Split, i: usize| {
        let id = format!("{lang}-{dialect}-{split}-{i:04}");
        let utt_seed = derive_seed(seed, &id);
        let mut rng = rng_for(utt_seed, "duration");
        let raw = if counts.max_seconds > counts.min_seconds {
            rng.gen_range(counts.min_seconds..=counts.max_seconds)
        } else {
            counts.min_seconds
        };
        let seconds = sample_count(raw) as f64 / SAMPLE_RATE as f64;
        entries.push(ManifestEntry {
            id,
            lang: lang.to_string(),
            dialect: dialect.to_string(),
            split,
            seconds,
            source: Source::Seed(utt_seed),
        });
    };
    for s in specs {
        for i in 0..counts.train {
            push(&s.code, &s.dialects[i % s.dialects.len()].id, Split::Train, i);
        }
        for i in 0..counts.dev {
            push(&s.code, DEFAULT_DIALECT, Split::Dev, i);
        }
        for d in &s.dialects[1..] {
            for i in 0..counts.dialect_dev {
                push(&s.code, &d.id, Split::DialectDev, i);
            }
        }
    }
    Ok(Corpus {
        specs: specs.to_vec(),
        entries,
        root: None,
    })
}

impl Corpus {
    /// Language codes in class-index order.
    pub fn languages(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.code.clone()).collect()
    }

    pub fn class_of(&self, lang: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.code == lang)
            .ok_or_else(|| Error::NotFound(format!("language `{lang}`")))
    }

    pub fn spec(&self, lang: &str) -> Result<&SyntheticLanguageSpec> {
        Ok(&self.specs[self.class_of(lang)?])
    }

    /// Geolocation targets for every language on a lattice of `points`.
    pub fn geo_table(&self, points: usize) -> Result<LanguageGeoTable> {
        LanguageGeoTable::from_coordinates(
            fibonacci_lattice(points)?,
            self.specs.iter().map(|s| (s.code.as_str(), s.coordinate)),
        )
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Samples of one utterance.
    pub fn signal(&self, e: &ManifestEntry) -> Result<Vec<f32>> {
        match &e.source {
            Source::Seed(seed) => synth_utterance(self.spec(&e.lang)?, &e.dialect, e.seconds, *seed),
            Source::Path(rel) => {
                let root = self
                    .root
                    .as_ref()
                    .ok_or_else(|| Error::NotFound(format!("corpus root for `{rel}`")))?;
                read_signal(&root.join(rel))
            }
        }
    }

    /// Signals of all entries of a split, keyed by entry index.
    pub fn load_split(&self, split: Split) -> Result<BTreeMap<usize, Vec<f32>>> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, e)| Ok((i, self.signal(e)?)))
            .collect()
    }

    /// Writes the manifest, language table and specs under `dir`. With
    /// `store_signals` every utterance is also rendered to
    /// `signals/<id>.f32` and the manifest points there.
    pub fn write(&mut self, dir: &Path, store_signals: bool) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        if store_signals {
            let sig_dir = dir.join(SIGNAL_DIR);
            fs::create_dir_all(&sig_dir).map_err(|e| Error::io(&sig_dir, e))?;
            for i in 0..self.entries.len() {
                let e = &self.entries[i];
                let samples = self.signal(e)?;
                let rel = format!("{SIGNAL_DIR}/{}.f32", e.id);
                let path = dir.join(&rel);
                write_signal(&path, &samples)?;
                written.push(path);
                self.entries[i].source = Source::Path(rel);
            }
        }
        self.root = Some(dir.to_path_buf());

        let manifest = dir.join(MANIFEST_FILE);
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
        let langs = dir.join(LANGUAGES_FILE);
        fs::write(&langs, self.geo_table(1)?.to_text()).map_err(|e| Error::io(&langs, e))?;
        let specs = dir.join(SPECS_FILE);
        fs::write(&specs, serde_json::to_string_pretty(&self.specs)? + "\n")
            .map_err(|e| Error::io(&specs, e))?;
        written.extend([manifest, langs, specs]);
        Ok(written)
    }

    /// Reads a corpus written by [`Corpus::write`]. Every manifest language
    /// must have a spec and every dialect must exist.
    pub fn load(dir: &Path) -> Result<Self> {
        let specs_path = dir.join(SPECS_FILE);
        let text = fs::read_to_string(&specs_path).map_err(|e| Error::io(&specs_path, e))?;
        let specs: Vec<SyntheticLanguageSpec> = serde_json::from_str(&text)?;
        let index: HashMap<&str, &SyntheticLanguageSpec> = specs.iter().map(|s| (s.code.as_str(), s)).collect();
        let path = dir.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.clone(),
                line: n + 1,
                msg,
            };
            let e: ManifestEntry = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let spec = index
                .get(e.lang.as_str())
                .ok_or_else(|| parse_err(format!("unknown language `{}`", e.lang)))?;
            spec.dialect(&e.dialect).map_err(|err| parse_err(err.to_string()))?;
            entries.push(e);
        }
        Ok(Self {
            specs,
            entries,
            root: Some(dir.to_path_buf()),
        })
    }
}

pub fn write_signal(path: &Path, samples: &[f32]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_le_bytes()).collect();
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_signal(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidInput(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}
