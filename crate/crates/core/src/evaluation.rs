//! Per-exit accuracy, the proxy A-distance, feature export, and multi-seed
//! aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{argmax, EncoderBundle};
use crate::tensor::{Scalar, SeededRng};

/// Sequences per forward pass in batched evaluation.
pub(crate) const EVAL_CHUNK: usize = 64;

fn require_frozen<S: Scalar>(bundle: &EncoderBundle<S>, what: &str) -> Result<()> {
    if bundle.is_frozen() {
        Ok(())
    } else {
        Err(Error::State(format!("{what} requires a frozen encoder")))
    }
}

/// Accuracy of every exit over a labeled corpus, without the frozen check
/// (used for dev evaluation during training).
pub(crate) fn exit_accuracies<S: Scalar>(bundle: &EncoderBundle<S>, corpus: &Corpus) -> Result<Vec<f64>> {
    let labels = corpus.labels("per_exit_accuracy")?;
    let seqs = corpus.sequences();
    let mut correct = vec![0usize; bundle.num_layers()];
    for (start, chunk) in (0..seqs.len()).step_by(EVAL_CHUNK).zip(seqs.chunks(EVAL_CHUNK)) {
        let out = bundle.encode_batch(chunk)?;
        for (layer, probs) in out.probs.iter().enumerate() {
            for r in 0..chunk.len() {
                if argmax(probs.row(r)).0 == labels[start + r] {
                    correct[layer] += 1;
                }
            }
        }
    }
    Ok(correct.iter().map(|&c| c as f64 / seqs.len() as f64).collect())
}

/// Accuracy of `argmax p_i` at every exit over a labeled corpus.
pub fn per_exit_accuracy<S: Scalar>(bundle: &EncoderBundle<S>, corpus: &Corpus) -> Result<Vec<f64>> {
    require_frozen(bundle, "per_exit_accuracy")?;
    exit_accuracies(bundle, corpus)
}

/// Pooled features of `layer` (1-based) for every sequence.
pub fn layer_features<S: Scalar>(bundle: &EncoderBundle<S>, seqs: &[&[u32]], layer: usize) -> Result<Vec<Vec<S>>> {
    if layer == 0 || layer > bundle.num_layers() {
        return Err(Error::input(format!(
            "layer {layer} out of range 1..={}",
            bundle.num_layers()
        )));
    }
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let enc = bundle.encode_batch(chunk)?;
        let pooled = &enc.pooled[layer - 1];
        out.extend((0..chunk.len()).map(|r| pooled.row(r).to_vec()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ADistanceReport {
    pub probe_error: f64,
    pub d_a: f64,
    /// 1-based layer whose features were probed, when known.
    pub layer: Option<usize>,
    /// Examples per domain used to train and to test the probe.
    pub train_per_domain: usize,
    pub test_per_domain: usize,
}

pub const MIN_PROBE_SAMPLES: usize = 40;
const PROBE_EPOCHS: usize = 500;
const PROBE_LR: f64 = 0.01;

/// `clamp(2 (1 - 2 eps), 0, 2)`.
pub fn d_a_from_error(eps: f64) -> f64 {
    (2.0 * (1.0 - 2.0 * eps)).clamp(0.0, 2.0)
}

/// Linear hinge-loss probe trained with SGD on one half of each domain and
/// tested on the other half.
///
/// The procedure treats the two domains identically, so swapping them with
/// the same seed gives the same error.
pub fn a_distance(source: &[Vec<f64>], target: &[Vec<f64>], rng: &mut SeededRng) -> Result<ADistanceReport> {
    if source.len() < MIN_PROBE_SAMPLES || target.len() < MIN_PROBE_SAMPLES {
        return Err(Error::input(format!(
            "a_distance needs at least {MIN_PROBE_SAMPLES} vectors per domain, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    let width = source[0].len();
    if width == 0 || source.iter().chain(target).any(|v| v.len() != width) {
        return Err(Error::input("a_distance: feature vectors differ in width"));
    }

    let n = source.len().min(target.len());
    let (pa, pb) = if source.len() == target.len() {
        let p = rng.permutation(n);
        (p.clone(), p)
    } else {
        let mut pa = rng.permutation(source.len());
        let mut pb = rng.permutation(target.len());
        pa.truncate(n);
        pb.truncate(n);
        (pa, pb)
    };
    let half = n / 2;
    let (train_a, test_a) = pa.split_at(half);
    let (train_b, test_b) = pb.split_at(half);

    // Standardize with statistics of the pooled training halves. Each domain
    // is summed separately so the result does not depend on argument order.
    let column_sums = |rows: &[Vec<f64>], idx: &[usize], f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
        let mut acc = vec![0.0; width];
        for &i in idx {
            for (k, (a, &v)) in acc.iter_mut().zip(&rows[i]).enumerate() {
                *a += f(k, v);
            }
        }
        acc
    };
    let count = (2 * half) as f64;
    let (sa, sb) = (column_sums(source, train_a, &|_, v| v), column_sums(target, train_b, &|_, v| v));
    let mean: Vec<f64> = sa.iter().zip(&sb).map(|(a, b)| (a + b) / count).collect();
    let sq = |k: usize, v: f64| (v - mean[k]) * (v - mean[k]);
    let (va, vb) = (column_sums(source, train_a, &sq), column_sums(target, train_b, &sq));
    let var: Vec<f64> = va.iter().zip(&vb).map(|(a, b)| a + b).collect();
    let scale: Vec<f64> = var
        .iter()
        .map(|s| {
            let sd = (s / count).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    let standardize = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect() };
    let xa: Vec<Vec<f64>> = train_a.iter().map(|&i| standardize(&source[i])).collect();
    let xb: Vec<Vec<f64>> = train_b.iter().map(|&i| standardize(&target[i])).collect();

    // Source is +1, target is -1. Each step uses one example of each.
    let mut w = vec![0.0; width];
    let mut bias = 0.0;
    let score = |w: &[f64], b: f64, x: &[f64]| -> f64 { w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b };
    for _ in 0..PROBE_EPOCHS {
        for j in rng.permutation(half) {
            let active_a = score(&w, bias, &xa[j]) < 1.0;
            let active_b = -score(&w, bias, &xb[j]) < 1.0;
            for (k, wk) in w.iter_mut().enumerate() {
                let ga = if active_a { -xa[j][k] } else { 0.0 };
                let gb = if active_b { xb[j][k] } else { 0.0 };
                *wk -= PROBE_LR * (ga + gb);
            }
            let ga = if active_a { -1.0 } else { 0.0 };
            let gb = if active_b { 1.0 } else { 0.0 };
            bias -= PROBE_LR * (ga + gb);
        }
    }

    let mut errors = 0;
    for &i in test_a {
        if score(&w, bias, &standardize(&source[i])) <= 0.0 {
            errors += 1;
        }
    }
    for &i in test_b {
        if -score(&w, bias, &standardize(&target[i])) <= 0.0 {
            errors += 1;
        }
    }
    let test = n - half;
    let eps = errors as f64 / (2 * test) as f64;
    Ok(ADistanceReport {
        probe_error: eps,
        d_a: d_a_from_error(eps),
        layer: None,
        train_per_domain: half,
        test_per_domain: test,
    })
}

/// A-distance between the `layer` features of two encoders on two corpora.
pub fn a_distance_between<S: Scalar>(
    source_bundle: &EncoderBundle<S>,
    source: &Corpus,
    target_bundle: &EncoderBundle<S>,
    target: &Corpus,
    layer: usize,
    rng: &mut SeededRng,
) -> Result<ADistanceReport> {
    let to_f64 = |rows: Vec<Vec<S>>| -> Vec<Vec<f64>> {
        rows.into_iter().map(|r| r.into_iter().map(S::as_f64).collect()).collect()
    };
    let fs = to_f64(layer_features(source_bundle, &source.sequences(), layer)?);
    let ft = to_f64(layer_features(target_bundle, &target.sequences(), layer)?);
    let mut report = a_distance(&fs, &ft, rng)?;
    report.layer = Some(layer);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub domain: String,
    pub label: Option<usize>,
    pub values: Vec<f32>,
}

/// Pooled features in the export CSV layout `domain,label,f0..f{d-1}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    pub width: usize,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn extend(&mut self, other: FeatureTable) -> Result<()> {
        if !self.rows.is_empty() && other.width != self.width {
            return Err(Error::input("feature tables differ in width"));
        }
        self.width = other.width;
        self.rows.extend(other.rows);
        Ok(())
    }

    /// Feature vectors of one domain, as f64.
    pub fn domain(&self, tag: &str) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .filter(|r| r.domain == tag)
            .map(|r| r.values.iter().map(|&v| v as f64).collect())
            .collect()
    }

    /// `f32` values are written in shortest round-trip form, so parsing the
    /// file recovers them exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,label");
        for k in 0..self.width {
            out.push_str(&format!(",f{k}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.domain);
            out.push(',');
            if let Some(l) = r.label {
                out.push_str(&l.to_string());
            }
            for v in &r.values {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(path: &Path, text: &str) -> Result<Self> {
        let err = |line: usize, reason: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let width = header
            .split(',')
            .count()
            .checked_sub(2)
            .filter(|_| header.starts_with("domain,label"))
            .ok_or_else(|| err(1, "header must start with domain,label"))?;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let domain = cells.next().unwrap_or_default().to_string();
            let label = match cells.next() {
                Some("") => None,
                Some(l) => Some(l.parse().map_err(|_| err(i + 2, "bad label"))?),
                None => return Err(err(i + 2, "missing label column")),
            };
            let values = cells
                .map(|c| c.parse::<f32>().map_err(|_| err(i + 2, "bad feature value")))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != width {
                return Err(err(i + 2, "wrong number of feature columns"));
            }
            rows.push(FeatureRow { domain, label, values });
        }
        Ok(FeatureTable { width, rows })
    }
}

/// Pooled `layer` features (1-based) of every example in `corpus`.
pub fn export_features(bundle: &EncoderBundle<f32>, corpus: &Corpus, layer: usize, domain: &str) -> Result<FeatureTable> {
    require_frozen(bundle, "export_features")?;
    let feats = layer_features(bundle, &corpus.sequences(), layer)?;
    Ok(FeatureTable {
        width: bundle.config().d_model,
        rows: corpus
            .examples
            .iter()
            .zip(feats)
            .map(|(e, values)| FeatureRow {
                domain: domain.to_string(),
                label: e.label,
                values,
            })
            .collect(),
    })
}

/// Metrics of one encoder on the source and target test splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub source_test_accuracy: Vec<f64>,
    pub target_test_accuracy: Vec<f64>,
    /// Target accuracy when every sample is answered by the last exit.
    pub target_final_accuracy: f64,
    /// Target accuracy with early exiting at the selected threshold.
    pub target_early_exit_accuracy: f64,
    pub target_speedup: f64,
    pub target_exit_histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub config_digest: String,
    pub alpha: f64,
    pub source_only: ModelEvaluation,
    pub adapted: Option<ModelEvaluation>,
    pub a_distance_before: ADistanceReport,
    pub a_distance_after: Option<ADistanceReport>,
}

impl ExperimentReport {
    /// Every scalar metric, flattened under stable names.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![("alpha".to_string(), self.alpha)];
        let mut model = |prefix: &str, m: &ModelEvaluation| {
            for (i, a) in m.source_test_accuracy.iter().enumerate() {
                out.push((format!("{prefix}.source_test_accuracy.{}", i + 1), *a));
            }
            for (i, a) in m.target_test_accuracy.iter().enumerate() {
                out.push((format!("{prefix}.target_test_accuracy.{}", i + 1), *a));
            }
            out.push((format!("{prefix}.target_final_accuracy"), m.target_final_accuracy));
            out.push((format!("{prefix}.target_early_exit_accuracy"), m.target_early_exit_accuracy));
            out.push((format!("{prefix}.target_speedup"), m.target_speedup));
        };
        model("source_only", &self.source_only);
        if let Some(a) = &self.adapted {
            model("adapted", a);
        }
        out.push(("a_distance_before".into(), self.a_distance_before.d_a));
        if let Some(a) = &self.a_distance_after {
            out.push(("a_distance_after".into(), a.d_a));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Sample mean and sample standard deviation (n - 1) of a list of values.
pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.len() < 2 {
        return Err(Error::input("mean_std needs at least two values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(MeanStd { mean, std: var.sqrt() })
}

/// Mean and standard deviation of every metric across seeds.
pub fn multi_seed_summary(reports: &[ExperimentReport]) -> Result<BTreeMap<String, MeanStd>> {
    if reports.len() < 2 {
        return Err(Error::input("multi_seed_summary needs at least two reports"));
    }
    let digest = &reports[0].config_digest;
    if reports.iter().any(|r| &r.config_digest != digest) {
        return Err(Error::input("multi_seed_summary: reports come from different configurations"));
    }
    let per: Vec<Vec<(String, f64)>> = reports.iter().map(ExperimentReport::metrics).collect();
    let names: Vec<&String> = per[0].iter().map(|(n, _)| n).collect();
    if per.iter().any(|m| m.iter().map(|(n, _)| n).ne(names.iter().copied())) {
        return Err(Error::input("multi_seed_summary: reports carry different metrics"));
    }
    names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let vals: Vec<f64> = per.iter().map(|m| m[k].1).collect();
            Ok(((*name).clone(), mean_std(&vals)?))
        })
        .collect()
}
