//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use dadee_core::adaptation::{discriminator_objective, generator_objective, DiscriminatorStack, DISC_LEAKY_SLOPE};
use dadee_core::model::{init_encoder, BlockKind, EncoderBundle, EncoderConfig, PackedBatch, Pooling};
use dadee_core::source_training::source_loss;
use dadee_core::tensor::gradcheck::{finite_difference, max_relative_error, FD_STEP};
use dadee_core::tensor::{ParamSet, SeededRng, Tape, Tensor};
use dadee_core::Result;

pub fn tiny_config(kind: BlockKind) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        d_model: 8,
        block_kind: kind,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 15,
        max_seq_len: 8,
        num_classes: 2,
        pooling: Pooling::Mean,
    }
}

pub fn random_sequences(rng: &mut SeededRng, n: usize, vocab: usize, max_len: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let len = 1 + rng.below(max_len);
            (0..len).map(|_| rng.below(vocab) as u32).collect()
        })
        .collect()
}

fn with_values(names: &[String], values: &[Tensor<f64>]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (n, t) in names.iter().zip(values) {
        p.push(n.clone(), t.clone());
    }
    p
}

fn perturbed(p: &ParamSet<f64>, rng: &mut SeededRng, amount: f64) -> ParamSet<f64> {
    let values: Vec<Tensor<f64>> = p
        .tensors()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            for v in t.data_mut() {
                *v += rng.uniform(-amount, amount);
            }
            t
        })
        .collect();
    with_values(p.names(), &values)
}

/// Worst relative error of every body and head gradient of the weighted
/// source loss.
pub fn source_loss_error(kind: BlockKind, seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let config = tiny_config(kind);
    let bundle = init_encoder(&config, &mut rng)?.cast::<f64>();
    let seqs = random_sequences(&mut rng, 4, config.vocab_size, config.max_seq_len);
    let labels: Vec<usize> = (0..seqs.len()).map(|_| rng.below(2)).collect();
    let batch = PackedBatch::new(&seqs, &config)?;
    let nb = bundle.body().len();
    let names: Vec<String> = bundle.body().names().iter().chain(bundle.heads().names()).cloned().collect();

    let eval = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let b = EncoderBundle::from_parts(
            config.clone(),
            with_values(&names[..nb], &values[..nb]),
            with_values(&names[nb..], &values[nb..]),
            false,
        )?;
        let mut tape = Tape::new();
        let enc = b.bind(&mut tape, true, true);
        let loss = source_loss(&mut tape, &enc, &batch, &labels)?;
        let grads = if want_grad {
            let g = tape.backward(loss)?;
            enc.body_vars().iter().chain(enc.head_vars()).map(|&v| g.wrt(v)).collect()
        } else {
            Vec::new()
        };
        Ok((tape.value(loss).item(), grads))
    };
    let values: Vec<Tensor<f64>> = bundle.body().tensors().iter().chain(bundle.heads().tensors()).cloned().collect();
    let (_, analytic) = eval(&values, true)?;
    let numeric = finite_difference(&values, FD_STEP, |v| eval(v, false).map(|r| r.0))?;
    Ok(max_relative_error(&analytic, &numeric))
}

struct AdversarialFixture {
    config: EncoderConfig,
    source: EncoderBundle<f64>,
    target_body: ParamSet<f64>,
    discs: DiscriminatorStack<f64>,
    xs: Vec<Vec<u32>>,
    xt: Vec<Vec<u32>>,
}

fn adversarial_fixture(kind: BlockKind, seed: u64) -> Result<AdversarialFixture> {
    let mut rng = SeededRng::new(seed);
    let config = tiny_config(kind);
    let mut source = init_encoder(&config, &mut rng)?.cast::<f64>();
    source.freeze();
    // Move the target away from the source so the distillation term is live.
    let target_body = perturbed(source.body(), &mut rng, 0.05);
    let discs = DiscriminatorStack::new(config.num_layers, config.d_model, 6, &mut rng)?.cast::<f64>();
    let xs = random_sequences(&mut rng, 3, config.vocab_size, config.max_seq_len);
    let xt = random_sequences(&mut rng, 3, config.vocab_size, config.max_seq_len);
    Ok(AdversarialFixture { config, source, target_body, discs, xs, xt })
}

/// Pre-activations this close to a LeakyReLU kink make central differences
/// straddle the corner.
pub const KINK_MARGIN: f64 = 1e-3;

/// Smallest absolute pre-activation of any discriminator hidden unit on
/// the given per-layer features.
fn kink_distance(discs: &DiscriminatorStack<f64>, pooled: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = discs.params().bind(&mut tape, false);
    let per = p.len() / pooled.len();
    let mut closest = f64::INFINITY;
    for (layer, x) in pooled.iter().enumerate() {
        let w = &p[layer * per..(layer + 1) * per];
        let mut h = tape.constant(x.clone());
        for k in 0..2 {
            h = tape.matmul(h, w[2 * k])?;
            h = tape.add_bias(h, w[2 * k + 1])?;
            closest = tape.value(h).data().iter().fold(closest, |m, v| m.min(v.abs()));
            h = tape.leaky_relu(h, DISC_LEAKY_SLOPE)?;
        }
    }
    Ok(closest)
}

/// Worst relative error of the generator-plus-distillation gradient with
/// respect to every target body parameter, or `None` when the fixture sits
/// on a discriminator kink.
pub fn generator_loss_error(kind: BlockKind, seed: u64, kd_weight: f64) -> Result<Option<f64>> {
    let f = adversarial_fixture(kind, seed)?;
    let xs = PackedBatch::new(&f.xs, &f.config)?;
    let xt = PackedBatch::new(&f.xt, &f.config)?;
    let source_probs = f.source.encode_batch(&f.xs)?.probs;
    let target = f.source.clone_for_target()?;
    let start = EncoderBundle::from_parts(f.config.clone(), f.target_body.clone(), target.heads().clone(), true)?;
    if kink_distance(&f.discs, &start.encode_batch(&f.xt)?.pooled)? < KINK_MARGIN {
        return Ok(None);
    }

    let eval = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let body = with_values(f.target_body.names(), values);
        let b = EncoderBundle::from_parts(f.config.clone(), body, target.heads().clone(), false)?;
        let mut tape = Tape::new();
        let enc = b.bind(&mut tape, true, false);
        let discs = f.discs.bind(&mut tape, false);
        let losses = generator_objective(&mut tape, &enc, &discs, &xs, &xt, &source_probs, kd_weight)?;
        let grads = if want_grad {
            let g = tape.backward(losses.total)?;
            enc.body_vars().iter().map(|&v| g.wrt(v)).collect()
        } else {
            Vec::new()
        };
        Ok((tape.value(losses.total).item(), grads))
    };
    let values = f.target_body.tensors().to_vec();
    let (_, analytic) = eval(&values, true)?;
    let numeric = finite_difference(&values, FD_STEP, |v| eval(v, false).map(|r| r.0))?;
    Ok(Some(max_relative_error(&analytic, &numeric)))
}

/// Worst relative error of the discriminator loss gradient with respect to
/// every discriminator parameter, or `None` on a kink.
pub fn discriminator_loss_error(kind: BlockKind, seed: u64) -> Result<Option<f64>> {
    let f = adversarial_fixture(kind, seed)?;
    let src_pooled = f.source.encode_batch(&f.xs)?.pooled;
    let target = EncoderBundle::from_parts(f.config.clone(), f.target_body.clone(), f.source.heads().clone(), true)?;
    let tgt_pooled = target.encode_batch(&f.xt)?.pooled;
    let closest = kink_distance(&f.discs, &src_pooled)?.min(kink_distance(&f.discs, &tgt_pooled)?);
    if closest < KINK_MARGIN {
        return Ok(None);
    }

    let eval = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let discs = f.discs.with_params(with_values(f.discs.params().names(), values));
        let mut tape = Tape::new();
        let bound = discs.bind(&mut tape, true);
        let loss = discriminator_objective(&mut tape, &bound, &src_pooled, &tgt_pooled)?;
        let grads = if want_grad {
            let g = tape.backward(loss)?;
            bound.vars().iter().map(|&v| g.wrt(v)).collect()
        } else {
            Vec::new()
        };
        Ok((tape.value(loss).item(), grads))
    };
    let values = f.discs.params().tensors().to_vec();
    let (_, analytic) = eval(&values, true)?;
    let numeric = finite_difference(&values, FD_STEP, |v| eval(v, false).map(|r| r.0))?;
    Ok(Some(max_relative_error(&analytic, &numeric)))
}

/// A small synthetic experiment that trains in about a second per seed.
pub fn small_experiment(shift: f64, seeds: &[u64]) -> dadee_core::experiment::ExperimentConfig {
    let text = format!(
        r#"{{
            "model": {{"num_layers": 4, "d_model": 32, "block_kind": "ffn_only", "d_ff": 64, "max_seq_len": 32}},
            "source_training": {{"epochs": 3, "batch_size": 16, "lr": 1e-3, "patience": 1}},
            "adaptation": {{"epochs": 1, "batch_size": 16, "lr_generator": 1e-4, "lr_discriminator": 1e-2,
                            "disc_steps_per_gen_step": 2, "kd_weight": 10.0, "discriminator_hidden": 32, "adam_beta1": 0.5}},
            "data": {{"synthetic": {{"shift": {shift}, "indicative_words": 32,
                "sizes": {{"source_train": 1000, "source_dev": 200, "source_test": 500, "target_train": 500, "target_test": 500}}}}}},
            "seeds": {seeds:?}
        }}"#
    );
    dadee_core::experiment::ExperimentConfig::from_json(&text).expect("valid test config")
}
