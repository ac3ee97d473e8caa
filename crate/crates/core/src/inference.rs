//! Early-exit inference, the speedup ratio, and threshold selection.

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{argmax, EncoderBundle, PackedBatch};
use crate::tensor::{Scalar, Tape};

/// The threshold search space used for selection by default.
pub const DEFAULT_SEARCH_SPACE: [f64; 5] = [0.8, 0.85, 0.9, 0.95, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    /// 1-based.
    pub exit_layer: usize,
    pub label: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub decisions: Vec<ExitDecision>,
    /// `histogram[i]` counts samples that exited at layer `i + 1`.
    pub histogram: Vec<usize>,
}

impl InferenceTrace {
    pub fn accuracy(&self, labels: &[usize]) -> Result<f64> {
        if labels.len() != self.decisions.len() {
            return Err(Error::input("accuracy: label count differs from trace length"));
        }
        let hits = self.decisions.iter().zip(labels).filter(|(d, &y)| d.label == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::config("alpha", format!("{alpha} is outside (0, 1]")))
    }
}

/// The exit rule applied to a list of per-layer probability vectors: the
/// first non-final layer whose confidence reaches `alpha`, else the last.
pub fn exit_from_probs<S: Scalar>(probs: &[&[S]], alpha: f64) -> ExitDecision {
    let last = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        let (label, conf) = argmax(p);
        let conf = conf.as_f64();
        if i == last || conf >= alpha {
            return ExitDecision {
                exit_layer: i + 1,
                label,
                confidence: conf,
            };
        }
    }
    unreachable!("the last layer always answers")
}

/// Runs layers one at a time and stops at the first confident exit; layers
/// past the exit are never computed.
pub fn infer_one<S: Scalar>(bundle: &EncoderBundle<S>, token_ids: &[u32], alpha: f64) -> Result<ExitDecision> {
    if !bundle.is_frozen() {
        return Err(Error::State("inference requires a frozen encoder".into()));
    }
    check_alpha(alpha)?;
    let batch = PackedBatch::new(&[token_ids], bundle.config())?;
    let mut tape = Tape::new();
    let enc = bundle.bind(&mut tape, false, false);
    let last = bundle.num_layers() - 1;
    let mut h = enc.embed(&mut tape, &batch)?;
    for layer in 0..=last {
        h = enc.block(&mut tape, layer, h, &batch)?;
        let pooled = enc.pool(&mut tape, h, &batch)?;
        let (_, probs) = enc.head(&mut tape, layer, pooled)?;
        let (label, conf) = argmax(tape.value(probs).row(0));
        let conf = conf.as_f64();
        if layer == last || conf >= alpha {
            return Ok(ExitDecision {
                exit_layer: layer + 1,
                label,
                confidence: conf,
            });
        }
    }
    unreachable!("the last layer always answers")
}

/// [`infer_one`] on every example, one sample at a time.
pub fn infer_corpus<S: Scalar>(bundle: &EncoderBundle<S>, corpus: &Corpus, alpha: f64) -> Result<InferenceTrace> {
    if corpus.is_empty() {
        return Err(Error::input("infer_corpus: empty corpus"));
    }
    let mut histogram = vec![0; bundle.num_layers()];
    let decisions = corpus
        .examples
        .iter()
        .map(|e| {
            let d = infer_one(bundle, &e.ids, alpha)?;
            histogram[d.exit_layer - 1] += 1;
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InferenceTrace { decisions, histogram })
}

/// `sum(L * n_i) / sum(i * n_i)`.
pub fn speedup(histogram: &[usize]) -> Result<f64> {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return Err(Error::input("speedup: empty histogram"));
    }
    let l = histogram.len();
    let cost: usize = histogram.iter().enumerate().map(|(i, n)| (i + 1) * n).sum();
    Ok((l * total) as f64 / cost as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub accuracy: f64,
    pub speedup: f64,
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub alpha_star: f64,
}

impl SweepResult {
    pub fn point(&self, alpha: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.alpha == alpha)
    }

    /// `alpha,accuracy,speedup,n_1..n_L`
    pub fn to_csv(&self) -> String {
        let layers = self.points.first().map_or(0, |p| p.histogram.len());
        let mut out = String::from("alpha,accuracy,speedup");
        for i in 1..=layers {
            out.push_str(&format!(",n_{i}"));
        }
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!("{},{},{}", p.alpha, p.accuracy, p.speedup));
            for n in &p.histogram {
                out.push_str(&format!(",{n}"));
            }
            out.push('\n');
        }
        out
    }
}

/// The index of the best point: highest accuracy, then highest speedup,
/// then earliest in the search order.
pub fn best_point(points: &[SweepPoint]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in points.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let q = &points[b];
                p.accuracy > q.accuracy || (p.accuracy == q.accuracy && p.speedup > q.speedup)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Accuracy, speedup and exit histogram for each threshold.
pub fn sweep<S: Scalar>(bundle: &EncoderBundle<S>, corpus: &Corpus, search_space: &[f64]) -> Result<Vec<SweepPoint>> {
    let labels = corpus.labels("sweep")?;
    search_space
        .iter()
        .map(|&alpha| {
            let trace = infer_corpus(bundle, corpus, alpha)?;
            Ok(SweepPoint {
                alpha,
                accuracy: trace.accuracy(&labels)?,
                speedup: speedup(&trace.histogram)?,
                histogram: trace.histogram,
            })
        })
        .collect()
}

/// Sweeps `search_space` on a labeled validation split and picks the
/// threshold with the best accuracy, preferring higher speedup on ties.
pub fn select_alpha<S: Scalar>(bundle: &EncoderBundle<S>, validation: &Corpus, search_space: &[f64]) -> Result<SweepResult> {
    if search_space.is_empty() {
        return Err(Error::config("search_space", "must not be empty"));
    }
    for &a in search_space {
        check_alpha(a)?;
    }
    let points = sweep(bundle, validation, search_space)?;
    let alpha_star = points[best_point(&points).expect("nonempty")].alpha;
    Ok(SweepResult { points, alpha_star })
}
