//! Corpora, vocabulary, TSV ingestion, batching, and the synthetic
//! domain-shift generator.

mod batches;
mod synthetic;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batches::{paired_batches, BatchPair, PairedBatches};
pub use synthetic::{generate_shift_pair, ShiftPair, SplitSizes, SyntheticShiftSpec};
pub use vocab::{build_vocab, Vocabulary, PAD, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SourceTrain,
    SourceDev,
    SourceTest,
    TargetTrain,
    TargetTest,
}

impl Role {
    pub fn is_source(self) -> bool {
        matches!(self, Role::SourceTrain | Role::SourceDev | Role::SourceTest)
    }
}

/// Untokenized text rows, as read from a TSV file or produced by the
/// synthetic generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCorpus {
    pub rows: Vec<(Option<usize>, String)>,
}

impl RawCorpus {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|(_, t)| t.as_str())
    }

    /// TSV rendering, the inverse of [`read_tsv`].
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (label, text) in &self.rows {
            if let Some(l) = label {
                out.push_str(&format!("{l}\t"));
            }
            out.push_str(text);
            out.push('\n');
        }
        out
    }
}

/// Parses TSV rows: `label<TAB>text` when `labeled`, bare `text` otherwise.
/// Blank lines are skipped.
pub fn parse_tsv(path: &Path, contents: &str, labeled: bool, num_classes: usize) -> Result<RawCorpus> {
    let err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut rows = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let (label, text) = if labeled {
            let (l, t) = line
                .split_once('\t')
                .ok_or_else(|| err(lineno, "expected `label<TAB>text`, found no tab".into()))?;
            let l: usize = l
                .trim()
                .parse()
                .map_err(|_| err(lineno, format!("label {l:?} is not a non-negative integer")))?;
            if l >= num_classes {
                return Err(err(lineno, format!("label {l} outside 0..{}", num_classes - 1)));
            }
            (Some(l), t)
        } else {
            if line.contains('\t') {
                return Err(err(lineno, "unexpected tab in unlabeled row".into()));
            }
            (None, line)
        };
        if text.split_whitespace().next().is_none() {
            return Err(err(lineno, "empty text".into()));
        }
        rows.push((label, text.to_string()));
    }
    Ok(RawCorpus { rows })
}

pub fn read_tsv(path: &Path, labeled: bool, num_classes: usize) -> Result<RawCorpus> {
    let contents = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(path, &contents, labeled, num_classes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub role: Role,
    pub domain_name: String,
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn from_raw(
        raw: &RawCorpus,
        vocab: &Vocabulary,
        max_seq_len: usize,
        role: Role,
        domain_name: impl Into<String>,
        num_classes: usize,
    ) -> Result<Self> {
        let corpus = Corpus {
            role,
            domain_name: domain_name.into(),
            num_classes,
            examples: raw
                .rows
                .iter()
                .map(|(label, text)| Example {
                    ids: vocab.tokenize(text, max_seq_len),
                    label: *label,
                })
                .collect(),
        };
        if role.is_source() && !corpus.is_labeled() {
            return Err(Error::input(format!("{role:?} corpus must be labeled")));
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.examples.is_empty() && self.examples.iter().all(|e| e.label.is_some())
    }

    pub fn sequences(&self) -> Vec<&[u32]> {
        self.examples.iter().map(|e| e.ids.as_slice()).collect()
    }

    /// All labels, or an error naming `what` if any example is unlabeled.
    pub fn labels(&self, what: &str) -> Result<Vec<usize>> {
        if self.examples.is_empty() {
            return Err(Error::input(format!("{what}: corpus is empty")));
        }
        self.examples
            .iter()
            .map(|e| e.label)
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::input(format!("{what}: corpus `{}` is not fully labeled", self.domain_name)))
    }

    /// The label-free view handed to the adapter.
    pub fn unlabeled(&self) -> UnlabeledCorpus {
        UnlabeledCorpus {
            domain_name: self.domain_name.clone(),
            sequences: self.examples.iter().map(|e| e.ids.clone()).collect(),
        }
    }
}

/// Token sequences with no labels at all; the only form in which target
/// training data reaches adaptation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnlabeledCorpus {
    pub domain_name: String,
    sequences: Vec<Vec<u32>>,
}

impl UnlabeledCorpus {
    pub fn new(domain_name: impl Into<String>, sequences: Vec<Vec<u32>>) -> Self {
        UnlabeledCorpus {
            domain_name: domain_name.into(),
            sequences,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn get(&self, i: usize) -> &[u32] {
        &self.sequences[i]
    }
}
