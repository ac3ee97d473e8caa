//! Adversarial adaptation of a target encoder with per-layer discriminators
//! and per-layer distillation from the frozen source encoder.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{paired_batches, Corpus, UnlabeledCorpus};
use crate::error::{Error, Result};
use crate::evaluation::exit_accuracies;
use crate::model::{init_uniform, BoundEncoder, EncoderBundle, PackedBatch};
use crate::source_training::weighted_aggregate_vars;
use crate::tensor::loss::{kl_rows, neg_log_complement_mean, neg_log_mean, PROB_FLOOR};
use crate::tensor::{AdamConfig, AdamState, ParamSet, Scalar, SeededRng, Tape, Tensor, Var};

/// Negative-side slope of the discriminators' LeakyReLU.
pub const DISC_LEAKY_SLOPE: f64 = 0.01;

const PARAMS_PER_DISC: usize = 6;

/// One MLP `width -> h -> h -> 1` per encoder layer, each giving the
/// probability that a pooled representation came from the source domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorStack<S: Scalar = f32> {
    input_width: usize,
    hidden: usize,
    params: ParamSet<S>,
}

impl DiscriminatorStack<f32> {
    pub fn new(num_layers: usize, input_width: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        if num_layers == 0 || input_width == 0 || hidden == 0 {
            return Err(Error::config("discriminator_hidden", "discriminator sizes must be positive"));
        }
        let mut params = ParamSet::new();
        for l in 0..num_layers {
            let name = |p: &str| format!("disc.{l:02}.{p}");
            params.push(name("hidden1"), init_uniform(rng, &[input_width, hidden], input_width));
            params.push(name("hidden1_bias"), Tensor::zeros(&[hidden]));
            params.push(name("hidden2"), init_uniform(rng, &[hidden, hidden], hidden));
            params.push(name("hidden2_bias"), Tensor::zeros(&[hidden]));
            params.push(name("output"), init_uniform(rng, &[hidden, 1], hidden));
            params.push(name("output_bias"), Tensor::zeros(&[1]));
        }
        Ok(DiscriminatorStack { input_width, hidden, params })
    }
}

impl<S: Scalar> DiscriminatorStack<S> {
    pub fn num_layers(&self) -> usize {
        self.params.len() / PARAMS_PER_DISC
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn cast<T: Scalar>(&self) -> DiscriminatorStack<T> {
        DiscriminatorStack {
            input_width: self.input_width,
            hidden: self.hidden,
            params: self.params.cast(),
        }
    }

    pub fn with_params(&self, params: ParamSet<S>) -> Self {
        DiscriminatorStack {
            input_width: self.input_width,
            hidden: self.hidden,
            params,
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>, requires_grad: bool) -> BoundDiscriminators {
        BoundDiscriminators {
            vars: self.params.bind(tape, requires_grad),
            input_width: self.input_width,
        }
    }
}

/// Discriminator parameters registered on a tape.
pub struct BoundDiscriminators {
    vars: Vec<Var>,
    input_width: usize,
}

impl BoundDiscriminators {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// `D_layer(x)` for a `[batch, width]` input, clamped to
    /// `[PROB_FLOOR, 1 - PROB_FLOOR]`; returns `[batch, 1]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, layer: usize, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.input_width {
            return Err(Error::Shape {
                op: "discriminator",
                lhs: shape.to_vec(),
                rhs: vec![self.input_width],
            });
        }
        let p = &self.vars[layer * PARAMS_PER_DISC..(layer + 1) * PARAMS_PER_DISC];
        let mut h = x;
        for k in 0..2 {
            h = tape.matmul(h, p[2 * k])?;
            h = tape.add_bias(h, p[2 * k + 1])?;
            h = tape.leaky_relu(h, DISC_LEAKY_SLOPE)?;
        }
        let z = tape.matmul(h, p[4])?;
        let z = tape.add_bias(z, p[5])?;
        let d = tape.sigmoid(z)?;
        tape.clamp(d, PROB_FLOOR, 1.0 - PROB_FLOOR)
    }
}

fn clamp_prob<S: Scalar>(tape: &mut Tape<'_, S>, d: Var) -> Result<Var> {
    tape.clamp(d, PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// `-log D(e_s) - log(1 - D(e_t))`, batch-meaned, from discriminator outputs.
pub fn disc_loss_from_outputs<S: Scalar>(tape: &mut Tape<'_, S>, d_source: Var, d_target: Var) -> Result<Var> {
    let ds = clamp_prob(tape, d_source)?;
    let dt = clamp_prob(tape, d_target)?;
    let a = neg_log_mean(tape, ds)?;
    let b = neg_log_complement_mean(tape, dt)?;
    tape.add(a, b)
}

/// `-log D(e_t)`, batch-meaned, from discriminator outputs.
pub fn gen_loss_from_outputs<S: Scalar>(tape: &mut Tape<'_, S>, d_target: Var) -> Result<Var> {
    let dt = clamp_prob(tape, d_target)?;
    neg_log_mean(tape, dt)
}

/// Discriminator loss of one layer on pooled source and target features.
pub fn disc_loss_layer<S: Scalar>(
    tape: &mut Tape<'_, S>,
    discs: &BoundDiscriminators,
    layer: usize,
    e_s: Var,
    e_t: Var,
) -> Result<Var> {
    let ds = discs.forward(tape, layer, e_s)?;
    let dt = discs.forward(tape, layer, e_t)?;
    disc_loss_from_outputs(tape, ds, dt)
}

/// Generator loss of one layer on pooled target features.
pub fn gen_loss_layer<S: Scalar>(tape: &mut Tape<'_, S>, discs: &BoundDiscriminators, layer: usize, e_t: Var) -> Result<Var> {
    let dt = discs.forward(tape, layer, e_t)?;
    gen_loss_from_outputs(tape, dt)
}

/// `KL(C_i(E_i^s(x_s)) || C_i(E_i^t(x_s)))`, batch-meaned; the source
/// probabilities are a constant reference.
pub fn kd_loss_layer<S: Scalar>(tape: &mut Tape<'_, S>, source_probs: &Tensor<S>, target_probs: Var) -> Result<Var> {
    if source_probs.last_dim() != tape.value(target_probs).last_dim() {
        return Err(Error::Shape {
            op: "kd_loss",
            lhs: source_probs.shape().to_vec(),
            rhs: tape.value(target_probs).shape().to_vec(),
        });
    }
    kl_rows(tape, source_probs, target_probs)
}

/// Weighted discriminator loss over all layers, with features as constants.
pub fn discriminator_objective<S: Scalar>(
    tape: &mut Tape<'_, S>,
    discs: &BoundDiscriminators,
    source_pooled: &[Tensor<S>],
    target_pooled: &[Tensor<S>],
) -> Result<Var> {
    let losses = source_pooled
        .iter()
        .zip(target_pooled)
        .enumerate()
        .map(|(i, (es, et))| {
            let es = tape.constant(es.clone());
            let et = tape.constant(et.clone());
            disc_loss_layer(tape, discs, i, es, et)
        })
        .collect::<Result<Vec<_>>>()?;
    weighted_aggregate_vars(tape, &losses)
}

/// Recorded generator-side losses of one step.
pub struct GeneratorLosses {
    pub total: Var,
    pub gen: Var,
    pub kd: Var,
}

/// Weighted `gen_i + kd_weight * kd_i` over all layers for a bound target
/// encoder. `source_probs[i]` are the frozen source exits on `x_s`.
pub fn generator_objective<S: Scalar>(
    tape: &mut Tape<'_, S>,
    target: &BoundEncoder<'_>,
    discs: &BoundDiscriminators,
    x_source: &PackedBatch,
    x_target: &PackedBatch,
    source_probs: &[Tensor<S>],
    kd_weight: f64,
) -> Result<GeneratorLosses> {
    let on_target = target.forward(tape, x_target)?;
    let on_source = target.forward(tape, x_source)?;
    let mut gens = Vec::with_capacity(on_target.len());
    let mut kds = Vec::with_capacity(on_target.len());
    let mut per_layer = Vec::with_capacity(on_target.len());
    for (i, (t, s)) in on_target.iter().zip(&on_source).enumerate() {
        let g = gen_loss_layer(tape, discs, i, t.pooled)?;
        let k = kd_loss_layer(tape, &source_probs[i], s.probs)?;
        let wk = tape.scale(k, kd_weight)?;
        per_layer.push(tape.add(g, wk)?);
        gens.push(g);
        kds.push(k);
    }
    Ok(GeneratorLosses {
        total: weighted_aggregate_vars(tape, &per_layer)?,
        gen: weighted_aggregate_vars(tape, &gens)?,
        kd: weighted_aggregate_vars(tape, &kds)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Discriminator steps per generator step.
    pub disc_steps_per_gen_step: usize,
    pub kd_weight: f64,
    pub discriminator_hidden: usize,
    /// First-moment decay of both adversarial Adam states.
    pub adam_beta1: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 5,
            batch_size: 16,
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            disc_steps_per_gen_step: 1,
            kd_weight: 1.0,
            discriminator_hidden: 128,
            adam_beta1: 0.9,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (field, lr) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.disc_steps_per_gen_step == 0 {
            return Err(Error::config("disc_steps_per_gen_step", "must be at least 1"));
        }
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            return Err(Error::config("kd_weight", "must be non-negative"));
        }
        if self.discriminator_hidden == 0 {
            return Err(Error::config("discriminator_hidden", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::config("adam_beta1", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptStep {
    pub step: usize,
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub kd_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptHistory {
    pub steps: Vec<AdaptStep>,
    /// Per-epoch target accuracy at every exit; filled only when a labeled
    /// diagnostic corpus is supplied. Never used for training.
    pub epoch_target_accuracy: Vec<Vec<f64>>,
}

impl AdaptHistory {
    /// `step,disc_loss,gen_loss,kd_loss`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,disc_loss,gen_loss,kd_loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{}\n", s.step, s.disc_loss, s.gen_loss, s.kd_loss));
        }
        out
    }
}

/// One Adam step of the discriminators on detached pooled features.
/// Returns the loss before the update.
pub fn discriminator_step(
    discs: &mut DiscriminatorStack<f32>,
    adam: &mut AdamState<f32>,
    source_pooled: &[Tensor<f32>],
    target_pooled: &[Tensor<f32>],
) -> Result<f64> {
    let (loss, grads) = {
        let mut tape = Tape::new();
        let bound = discs.bind(&mut tape, true);
        let l = discriminator_objective(&mut tape, &bound, source_pooled, target_pooled)?;
        let g = tape.backward(l)?;
        (tape.value(l).item(), bound.vars().iter().map(|&v| g.wrt(v)).collect::<Vec<_>>())
    };
    adam.step(discs.params_mut().tensors_mut().iter_mut(), &grads)?;
    Ok(loss as f64)
}

/// One Adam step of the target body against fixed discriminators. Returns
/// the weighted generator and distillation losses before the update.
pub fn generator_step(
    target: &mut EncoderBundle<f32>,
    adam: &mut AdamState<f32>,
    discs: &DiscriminatorStack<f32>,
    x_source: &PackedBatch,
    x_target: &PackedBatch,
    source_probs: &[Tensor<f32>],
    kd_weight: f64,
) -> Result<(f64, f64)> {
    let (gen, kd, grads) = {
        let mut tape = Tape::new();
        let enc = target.bind(&mut tape, true, false);
        let bound = discs.bind(&mut tape, false);
        let losses = generator_objective(&mut tape, &enc, &bound, x_source, x_target, source_probs, kd_weight)?;
        let g = tape.backward(losses.total)?;
        let grads: Vec<Tensor<f32>> = enc.body_vars().iter().map(|&v| g.wrt(v)).collect();
        (tape.value(losses.gen).item(), tape.value(losses.kd).item(), grads)
    };
    adam.step(target.body_mut()?.tensors_mut().iter_mut(), &grads)?;
    Ok((gen as f64, kd as f64))
}

/// Adam states of the two adversarial sides, configured from `config`.
pub fn adversarial_optimizers(
    target: &EncoderBundle<f32>,
    discs: &DiscriminatorStack<f32>,
    config: &AdaptConfig,
) -> Result<(AdamState<f32>, AdamState<f32>)> {
    let adam = |lr| AdamConfig { beta1: config.adam_beta1, ..AdamConfig::with_lr(lr) };
    Ok((
        AdamState::new(adam(config.lr_generator), target.body().tensors())?,
        AdamState::new(adam(config.lr_discriminator), discs.params().tensors())?,
    ))
}

/// Result of [`adapt`]: the frozen adapted encoder plus the trained
/// discriminators.
pub struct Adapted {
    pub target: EncoderBundle<f32>,
    pub discriminators: DiscriminatorStack<f32>,
    pub history: AdaptHistory,
}

/// Alternating discriminator and generator updates over paired batches.
///
/// `target` must come from `source.clone_for_target()`. Labels of the source
/// corpus are never read; `diagnostic`, if given, is only evaluated.
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    source: &EncoderBundle<f32>,
    mut target: EncoderBundle<f32>,
    mut discs: DiscriminatorStack<f32>,
    source_train: &Corpus,
    target_train: &UnlabeledCorpus,
    config: &AdaptConfig,
    rng: &mut SeededRng,
    diagnostic: Option<&Corpus>,
) -> Result<Adapted> {
    config.validate()?;
    if !source.is_frozen() {
        return Err(Error::State("source encoder must be frozen before adaptation".into()));
    }
    if target.is_frozen() {
        return Err(Error::State("target encoder is frozen".into()));
    }
    if !target.shares_heads_with(source) || target.config() != source.config() {
        return Err(Error::State("target encoder must be created with clone_for_target".into()));
    }
    let d = source.config().d_model;
    if discs.input_width() != d || discs.num_layers() != source.num_layers() {
        return Err(Error::Shape {
            op: "adapt",
            lhs: vec![discs.num_layers(), discs.input_width()],
            rhs: vec![source.num_layers(), d],
        });
    }

    let mut batches = paired_batches(source_train, target_train, config.batch_size, SeededRng::new(rng.next_u64()))?;
    let (mut adam_g, mut adam_d) = adversarial_optimizers(&target, &discs, config)?;
    let mut history = AdaptHistory::default();

    for _ in 0..config.epochs {
        for pair in batches.next_epoch() {
            let xs_seqs: Vec<&[u32]> = pair.source.iter().map(|&i| source_train.examples[i].ids.as_slice()).collect();
            let xt_seqs: Vec<&[u32]> = pair.target.iter().map(|&i| target_train.get(i)).collect();
            let xs = PackedBatch::new(&xs_seqs, source.config())?;
            let xt = PackedBatch::new(&xt_seqs, source.config())?;

            let src_out = source.encode_batch(&xs_seqs)?;
            let tgt_pooled = target.encode_batch(&xt_seqs)?.pooled;

            let mut disc_loss = None;
            for _ in 0..config.disc_steps_per_gen_step {
                let loss = discriminator_step(&mut discs, &mut adam_d, &src_out.pooled, &tgt_pooled)?;
                disc_loss.get_or_insert(loss);
            }
            let (gen, kd) = generator_step(&mut target, &mut adam_g, &discs, &xs, &xt, &src_out.probs, config.kd_weight)?;

            history.steps.push(AdaptStep {
                step: history.steps.len(),
                disc_loss: disc_loss.expect("at least one discriminator step"),
                gen_loss: gen,
                kd_loss: kd,
            });
        }
        if let Some(c) = diagnostic {
            history.epoch_target_accuracy.push(exit_accuracies(&target, c)?);
        }
    }

    target.freeze();
    Ok(Adapted {
        target,
        discriminators: discs,
        history,
    })
}
