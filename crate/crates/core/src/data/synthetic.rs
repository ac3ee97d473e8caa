//! Two-domain text generator with a tunable vocabulary shift.
//!
//! Every sentence mixes neutral filler words with class-indicative words.
//! An indicative word is drawn from the domain's exclusive list with
//! probability `shift` and from a list shared by both domains otherwise, so
//! `shift = 0` makes the domains identical and `shift = 1` makes their
//! indicative words disjoint.

use serde::{Deserialize, Serialize};

use super::RawCorpus;
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub source_train: usize,
    pub source_dev: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            source_train: 2000,
            source_dev: 400,
            source_test: 1000,
            target_train: 2000,
            target_test: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticShiftSpec {
    pub num_classes: usize,
    /// Filler words shared by both domains.
    pub neutral_words: usize,
    /// Size of each class's indicative word list, per list (shared, source, target).
    pub indicative_words: usize,
    pub shift: f64,
    /// Probability that a position holds an indicative word.
    pub indicative_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub label_noise: f64,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for SyntheticShiftSpec {
    fn default() -> Self {
        SyntheticShiftSpec {
            num_classes: 2,
            neutral_words: 40,
            indicative_words: 8,
            shift: 0.9,
            indicative_rate: 0.3,
            min_len: 8,
            max_len: 16,
            label_noise: 0.05,
            sizes: SplitSizes::default(),
            seed: 0,
        }
    }
}

impl SyntheticShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(field, format!("{v} is outside [0, 1]")))
            }
        };
        unit("shift", self.shift)?;
        unit("indicative_rate", self.indicative_rate)?;
        unit("label_noise", self.label_noise)?;
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.neutral_words == 0 || self.indicative_words == 0 {
            return Err(Error::config("indicative_words", "word lists must be nonempty"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("min_len", "need 1 <= min_len <= max_len"));
        }
        let s = &self.sizes;
        if [s.source_train, s.source_dev, s.source_test, s.target_train, s.target_test].contains(&0) {
            return Err(Error::config("sizes", "every split needs at least one example"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftPair {
    pub source_train: RawCorpus,
    pub source_dev: RawCorpus,
    pub source_test: RawCorpus,
    /// Labels are kept for diagnostics; adaptation only ever sees the
    /// unlabeled view.
    pub target_train: RawCorpus,
    pub target_test: RawCorpus,
}

#[derive(Clone, Copy)]
enum Domain {
    Source,
    Target,
}

fn sentence(spec: &SyntheticShiftSpec, domain: Domain, class: usize, rng: &mut SeededRng) -> String {
    let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    let words: Vec<String> = (0..len)
        .map(|_| {
            if rng.bernoulli(spec.indicative_rate) {
                let j = rng.below(spec.indicative_words);
                if rng.bernoulli(spec.shift) {
                    match domain {
                        Domain::Source => format!("src{class}_{j}"),
                        Domain::Target => format!("tgt{class}_{j}"),
                    }
                } else {
                    format!("shared{class}_{j}")
                }
            } else {
                format!("w{}", rng.below(spec.neutral_words))
            }
        })
        .collect();
    words.join(" ")
}

fn split(spec: &SyntheticShiftSpec, domain: Domain, n: usize, mut rng: SeededRng) -> RawCorpus {
    let rows = (0..n)
        .map(|_| {
            let class = rng.below(spec.num_classes);
            let text = sentence(spec, domain, class, &mut rng);
            let label = if rng.bernoulli(spec.label_noise) {
                (class + 1 + rng.below(spec.num_classes - 1)) % spec.num_classes
            } else {
                class
            };
            (Some(label), text)
        })
        .collect();
    RawCorpus { rows }
}

/// Generates all five splits; each split has its own random stream.
pub fn generate_shift_pair(spec: &SyntheticShiftSpec) -> Result<ShiftPair> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    let s = &spec.sizes;
    Ok(ShiftPair {
        source_train: split(spec, Domain::Source, s.source_train, root.fork(1)),
        source_dev: split(spec, Domain::Source, s.source_dev, root.fork(2)),
        source_test: split(spec, Domain::Source, s.source_test, root.fork(3)),
        target_train: split(spec, Domain::Target, s.target_train, root.fork(4)),
        target_test: split(spec, Domain::Target, s.target_test, root.fork(5)),
    })
}
