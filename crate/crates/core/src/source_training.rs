//! Supervised source training of all exits at once, with early stopping on
//! the dev split.

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::evaluation::exit_accuracies;
use crate::model::{EncoderBundle, PackedBatch};
use crate::tensor::loss::cross_entropy_logits;
use crate::tensor::{AdamConfig, AdamState, Scalar, SeededRng, Tape, Tensor, Var};

/// `sum(i * v_i) / sum(i)` for `i = 1..=L`.
pub fn weighted_aggregate(values: &[f64], num_layers: usize) -> Result<f64> {
    if values.len() != num_layers || num_layers == 0 {
        return Err(Error::input(format!(
            "weighted_aggregate: expected {num_layers} values, got {}",
            values.len()
        )));
    }
    let num: f64 = values.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
    let den = (num_layers * (num_layers + 1) / 2) as f64;
    Ok(num / den)
}

/// Depth weights `i / sum(i)`.
pub fn depth_weights(num_layers: usize) -> Vec<f64> {
    let den = (num_layers * (num_layers + 1) / 2) as f64;
    (1..=num_layers).map(|i| i as f64 / den).collect()
}

/// The weighted aggregate of recorded scalar losses.
pub fn weighted_aggregate_vars<S: Scalar>(tape: &mut Tape<'_, S>, losses: &[Var]) -> Result<Var> {
    if losses.is_empty() {
        return Err(Error::input("weighted_aggregate: no losses"));
    }
    let w = depth_weights(losses.len());
    let mut acc = tape.scale(losses[0], w[0])?;
    for (&l, &wi) in losses.iter().zip(&w).skip(1) {
        let t = tape.scale(l, wi)?;
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 1e-4,
            patience: 1,
        }
    }
}

impl SourceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub dev_accuracy: Vec<f64>,
    pub dev_metric: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Weighted training loss of every batch, in order.
    pub batch_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn selected(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.selected)
    }

    /// `epoch,train_loss,dev_metric,selected,dev_acc_1..dev_acc_L`
    pub fn to_csv(&self) -> String {
        let layers = self.epochs.first().map_or(0, |e| e.dev_accuracy.len());
        let mut out = String::from("epoch,train_loss,dev_metric,selected");
        for i in 1..=layers {
            out.push_str(&format!(",dev_acc_{i}"));
        }
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}", e.epoch, e.mean_train_loss, e.dev_metric, e.selected));
            for a in &e.dev_accuracy {
                out.push_str(&format!(",{a}"));
            }
            out.push('\n');
        }
        out
    }
}

/// One optimizer step of the weighted per-exit cross-entropy. Returns the
/// loss before the update.
fn train_step(
    bundle: &mut EncoderBundle<f32>,
    adam: &mut AdamState<f32>,
    seqs: &[&[u32]],
    labels: &[usize],
) -> Result<f64> {
    let batch = PackedBatch::new(seqs, bundle.config())?;
    let (loss, grads) = {
        let mut tape = Tape::new();
        let enc = bundle.bind(&mut tape, true, true);
        let total = source_loss(&mut tape, &enc, &batch, labels)?;
        let g = tape.backward(total)?;
        let grads: Vec<Tensor<f32>> = enc.body_vars().iter().chain(enc.head_vars()).map(|&v| g.wrt(v)).collect();
        (tape.value(total).item() as f64, grads)
    };
    let (body, heads) = bundle.all_params_mut()?;
    adam.step(body.tensors_mut().iter_mut().chain(heads.tensors_mut().iter_mut()), &grads)?;
    Ok(loss)
}

/// Weighted sum over exits of batch-mean cross-entropy.
pub fn source_loss<S: Scalar>(
    tape: &mut Tape<'_, S>,
    enc: &crate::model::BoundEncoder<'_>,
    batch: &PackedBatch,
    labels: &[usize],
) -> Result<Var> {
    let layers = enc.forward(tape, batch)?;
    let losses = layers
        .iter()
        .map(|l| cross_entropy_logits(tape, l.logits, labels))
        .collect::<Result<Vec<_>>>()?;
    weighted_aggregate_vars(tape, &losses)
}

/// Trains every parameter on the labeled source split, keeps the epoch with
/// the best depth-weighted dev accuracy, and returns it frozen.
pub fn train_source(
    mut bundle: EncoderBundle<f32>,
    train: &Corpus,
    dev: &Corpus,
    config: &SourceTrainConfig,
    rng: &mut SeededRng,
) -> Result<(EncoderBundle<f32>, TrainHistory)> {
    config.validate()?;
    if bundle.is_frozen() {
        return Err(Error::State("cannot train a frozen encoder".into()));
    }
    let labels = train.labels("train_source")?;
    dev.labels("train_source dev split")?;
    let num_layers = bundle.num_layers();
    let mut adam = {
        let all = bundle.body().tensors().iter().chain(bundle.heads().tensors());
        AdamState::new(AdamConfig::with_lr(config.lr), all)?
    };
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, EncoderBundle<f32>)> = None;

    for epoch in 1..=config.epochs {
        let order = rng.permutation(train.len());
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<&[u32]> = chunk.iter().map(|&i| train.examples[i].ids.as_slice()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = train_step(&mut bundle, &mut adam, &seqs, &ys)?;
            history.batch_losses.push(loss);
            total += loss;
            batches += 1;
        }
        let dev_accuracy = exit_accuracies(&bundle, dev)?;
        let dev_metric = weighted_aggregate(&dev_accuracy, num_layers)?;
        history.epochs.push(EpochRecord {
            epoch,
            mean_train_loss: total / batches as f64,
            dev_accuracy,
            dev_metric,
            selected: false,
        });
        match &best {
            Some((m, _, _)) if dev_metric <= *m => {}
            _ => best = Some((dev_metric, epoch, bundle.clone())),
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch > config.patience {
            break;
        }
    }

    let (_, best_epoch, mut chosen) = best.expect("at least one epoch ran");
    history.epochs[best_epoch - 1].selected = true;
    chosen.freeze();
    Ok((chosen, history))
}
