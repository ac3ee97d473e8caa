//! Experiment configuration and the end-to-end pipeline: data, source
//! training, adaptation, and evaluation of one seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{adapt, AdaptConfig, Adapted, DiscriminatorStack};
use crate::data::{build_vocab, generate_shift_pair, read_tsv, Corpus, RawCorpus, Role, SyntheticShiftSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{a_distance_between, per_exit_accuracy, ADistanceReport, ExperimentReport, ModelEvaluation};
use crate::inference::{infer_corpus, select_alpha, speedup, SweepResult, DEFAULT_SEARCH_SPACE};
use crate::model::{init_encoder, BlockKind, EncoderBundle, EncoderConfig, Pooling};
use crate::source_training::{train_source, SourceTrainConfig, TrainHistory};
use crate::tensor::SeededRng;

/// Encoder settings from the config file; vocabulary size and class count
/// come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub num_layers: usize,
    pub d_model: usize,
    pub block_kind: BlockKind,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub pooling: Pooling,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = EncoderConfig::default();
        ModelSettings {
            num_layers: c.num_layers,
            d_model: c.d_model,
            block_kind: c.block_kind,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_seq_len: c.max_seq_len,
            pooling: c.pooling,
        }
    }
}

impl ModelSettings {
    pub fn encoder_config(&self, vocab_size: usize, num_classes: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            d_model: self.d_model,
            block_kind: self.block_kind,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len: self.max_seq_len,
            num_classes,
            pooling: self.pooling,
        }
    }
}

/// TSV files of a real domain pair. Relative paths are resolved against the
/// config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvPaths {
    pub num_classes: usize,
    pub source_name: String,
    pub target_name: String,
    pub source_train: PathBuf,
    pub source_dev: PathBuf,
    pub source_test: PathBuf,
    /// Unlabeled: one text per line.
    pub target_train: PathBuf,
    pub target_test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticShiftSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tsv: Option<TsvPaths>,
    #[serde(default = "one")]
    pub min_count: usize,
}

fn one() -> usize {
    1
}

fn default_search_space() -> Vec<f64> {
    DEFAULT_SEARCH_SPACE.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub source_training: SourceTrainConfig,
    #[serde(default)]
    pub adaptation: AdaptConfig,
    pub data: DataSpec,
    #[serde(default = "default_search_space")]
    pub search_space: Vec<f64>,
    /// 1-based layer probed by the A-distance; the last layer when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_layer: Option<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(t) = &mut cfg.data.tsv {
            for p in [
                &mut t.source_train,
                &mut t.source_dev,
                &mut t.source_test,
                &mut t.target_train,
                &mut t.target_test,
            ] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, &self.data.tsv) {
            (Some(s), None) => s.validate()?,
            (None, Some(t)) => {
                if t.num_classes < 2 {
                    return Err(Error::config("data.tsv.num_classes", "need at least 2 classes"));
                }
                if t.source_name == t.target_name {
                    return Err(Error::config("data.tsv.target_name", "domain names must differ"));
                }
            }
            _ => return Err(Error::config("data", "exactly one of `synthetic` or `tsv` must be given")),
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.search_space.is_empty() || self.search_space.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::config("search_space", "thresholds must lie in (0, 1] and the list must be nonempty"));
        }
        self.source_training.validate()?;
        self.adaptation.validate()?;
        // Vocabulary size and classes are placeholders here; they are
        // checked again once the data is loaded.
        self.model.encoder_config(2, 2).validate()?;
        if let Some(l) = self.probe_layer {
            if l == 0 || l > self.model.num_layers {
                return Err(Error::config("probe_layer", format!("must be within 1..={}", self.model.num_layers)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything that determines results,
    /// i.e. the config without `seeds` and `output_dir`.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("seeds");
        obj.remove("output_dir");
        let canonical = serde_json::to_string(&v).expect("value serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn probe_layer(&self) -> usize {
        self.probe_layer.unwrap_or(self.model.num_layers)
    }

    pub fn domain_names(&self) -> (String, String) {
        match &self.data.tsv {
            Some(t) => (t.source_name.clone(), t.target_name.clone()),
            None => ("source".into(), "target".into()),
        }
    }
}

/// All five splits tokenized against one vocabulary.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub vocab: Vocabulary,
    pub encoder: EncoderConfig,
    pub source_train: Corpus,
    pub source_dev: Corpus,
    pub source_test: Corpus,
    /// May carry labels (synthetic data); adaptation only sees
    /// `target_train.unlabeled()`.
    pub target_train: Corpus,
    pub target_test: Corpus,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Datasets> {
    let (names, num_classes, raw) = match (&cfg.data.synthetic, &cfg.data.tsv) {
        (Some(spec), None) => {
            let p = generate_shift_pair(spec)?;
            (
                ("source".to_string(), "target".to_string()),
                spec.num_classes,
                [p.source_train, p.source_dev, p.source_test, p.target_train, p.target_test],
            )
        }
        (None, Some(t)) => {
            let n = t.num_classes;
            let read = |p: &Path, labeled| read_tsv(p, labeled, n);
            (
                (t.source_name.clone(), t.target_name.clone()),
                n,
                [
                    read(&t.source_train, true)?,
                    read(&t.source_dev, true)?,
                    read(&t.source_test, true)?,
                    read(&t.target_train, false)?,
                    read(&t.target_test, true)?,
                ],
            )
        }
        _ => return Err(Error::config("data", "exactly one of `synthetic` or `tsv` must be given")),
    };
    let [st, sd, ss, tt, ts]: [RawCorpus; 5] = raw;
    let vocab = build_vocab(&[&st, &tt], cfg.data.min_count)?;
    let encoder = cfg.model.encoder_config(vocab.len(), num_classes);
    encoder.validate()?;
    let max = encoder.max_seq_len;
    let mk = |raw: &RawCorpus, role: Role, name: &str| Corpus::from_raw(raw, &vocab, max, role, name, num_classes);
    let (sn, tn) = (names.0.as_str(), names.1.as_str());
    Ok(Datasets {
        source_train: mk(&st, Role::SourceTrain, sn)?,
        source_dev: mk(&sd, Role::SourceDev, sn)?,
        source_test: mk(&ss, Role::SourceTest, sn)?,
        target_train: mk(&tt, Role::TargetTrain, tn)?,
        target_test: mk(&ts, Role::TargetTest, tn)?,
        encoder,
        vocab,
    })
}

// Independent random streams of one run.
const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_DISC_INIT: u64 = 3;
const STREAM_ADAPT: u64 = 4;
const STREAM_PROBE: u64 = 5;

/// Initializes and trains the source encoder of one seed.
pub fn run_source(cfg: &ExperimentConfig, data: &Datasets, seed: u64) -> Result<(EncoderBundle, TrainHistory)> {
    let root = SeededRng::new(seed);
    let bundle = init_encoder(&data.encoder, &mut root.fork(STREAM_INIT))?;
    train_source(bundle, &data.source_train, &data.source_dev, &cfg.source_training, &mut root.fork(STREAM_TRAIN))
}

/// Clones the source into a target encoder and adapts it.
pub fn run_adapt(
    adapt_cfg: &AdaptConfig,
    data: &Datasets,
    source: &EncoderBundle,
    seed: u64,
    diagnostic: bool,
) -> Result<Adapted> {
    let root = SeededRng::new(seed);
    let target = source.clone_for_target()?;
    let discs = DiscriminatorStack::new(
        source.num_layers(),
        source.config().d_model,
        adapt_cfg.discriminator_hidden,
        &mut root.fork(STREAM_DISC_INIT),
    )?;
    adapt(
        source,
        target,
        discs,
        &data.source_train,
        &data.target_train.unlabeled(),
        adapt_cfg,
        &mut root.fork(STREAM_ADAPT),
        diagnostic.then_some(&data.target_test),
    )
}

/// Metrics of one encoder at a fixed threshold.
pub fn evaluate_model(bundle: &EncoderBundle, data: &Datasets, alpha: f64) -> Result<ModelEvaluation> {
    let source_test_accuracy = per_exit_accuracy(bundle, &data.source_test)?;
    let target_test_accuracy = per_exit_accuracy(bundle, &data.target_test)?;
    let trace = infer_corpus(bundle, &data.target_test, alpha)?;
    let labels = data.target_test.labels("evaluate")?;
    Ok(ModelEvaluation {
        target_final_accuracy: *target_test_accuracy.last().expect("at least two layers"),
        source_test_accuracy,
        target_test_accuracy,
        target_early_exit_accuracy: trace.accuracy(&labels)?,
        target_speedup: speedup(&trace.histogram)?,
        target_exit_histogram: trace.histogram,
    })
}

/// A-distance between source-encoder features of the source test split and
/// `target_encoder` features of the target test split.
pub fn domain_distance(
    cfg: &ExperimentConfig,
    data: &Datasets,
    source: &EncoderBundle,
    target_encoder: &EncoderBundle,
    seed: u64,
) -> Result<ADistanceReport> {
    let mut rng = SeededRng::new(seed).fork(STREAM_PROBE);
    a_distance_between(source, &data.source_test, target_encoder, &data.target_test, cfg.probe_layer(), &mut rng)
}

/// Threshold selection on the source dev split with the source encoder.
pub fn choose_alpha(cfg: &ExperimentConfig, data: &Datasets, source: &EncoderBundle) -> Result<SweepResult> {
    select_alpha(source, &data.source_dev, &cfg.search_space)
}

/// The full report of one seed.
pub fn build_report(
    cfg: &ExperimentConfig,
    data: &Datasets,
    source: &EncoderBundle,
    adapted: Option<&EncoderBundle>,
    seed: u64,
) -> Result<ExperimentReport> {
    let alpha = choose_alpha(cfg, data, source)?.alpha_star;
    Ok(ExperimentReport {
        seed,
        config_digest: cfg.digest(),
        alpha,
        source_only: evaluate_model(source, data, alpha)?,
        adapted: adapted.map(|a| evaluate_model(a, data, alpha)).transpose()?,
        a_distance_before: domain_distance(cfg, data, source, source, seed)?,
        a_distance_after: adapted.map(|a| domain_distance(cfg, data, source, a, seed)).transpose()?,
    })
}
