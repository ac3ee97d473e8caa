//! The L-layer multi-exit encoder.
//!
//! Layer `i` produces hidden states for every token; these are pooled into
//! one vector per sequence, and exit head `i` (a single linear map followed
//! by softmax) turns the pooled vector into class probabilities.
//!
//! Sequences are processed as a packed batch: all tokens of all sequences
//! are rows of one `[tokens, d_model]` matrix and the per-sequence lengths
//! mark the segment boundaries. Every kernel computes each row from its own
//! segment only, so a sequence gets bit-identical outputs whether it is
//! encoded alone or inside a batch.

mod checkpoint;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Scalar, SeededRng, Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, Phase, Provenance, TensorRecord, CHECKPOINT_FORMAT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Pre-norm self-attention followed by a feed-forward sublayer.
    Transformer,
    /// Feed-forward sublayer only; position-free.
    FfnOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    FirstToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub block_kind: BlockKind,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 6,
            d_model: 64,
            block_kind: BlockKind::Transformer,
            n_heads: 2,
            d_ff: 128,
            vocab_size: 2,
            max_seq_len: 64,
            num_classes: 2,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.num_layers < 2 {
            return Err(Error::config("num_layers", "need at least 2 layers"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.block_kind == BlockKind::Transformer {
            if self.n_heads == 0 {
                return Err(Error::config("n_heads", "must be positive"));
            }
            if self.d_model % self.n_heads != 0 {
                return Err(Error::config(
                    "n_heads",
                    format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
                ));
            }
        }
        Ok(())
    }

    fn block_param_names(&self) -> &'static [&'static str] {
        match self.block_kind {
            BlockKind::Transformer => TRANSFORMER_PARAMS,
            BlockKind::FfnOnly => FFN_PARAMS,
        }
    }

    fn has_positions(&self) -> bool {
        self.block_kind == BlockKind::Transformer
    }
}

const TRANSFORMER_PARAMS: &[&str] = &[
    "ln1.gain",
    "ln1.bias",
    "attn.query",
    "attn.key",
    "attn.value",
    "attn.output",
    "attn.output_bias",
    "ln2.gain",
    "ln2.bias",
    "ffn.in",
    "ffn.in_bias",
    "ffn.out",
    "ffn.out_bias",
];

const FFN_PARAMS: &[&str] = &["ln.gain", "ln.bias", "ffn.in", "ffn.in_bias", "ffn.out", "ffn.out_bias"];

pub(crate) fn block_name(layer: usize, part: &str) -> String {
    format!("block.{layer:02}.{part}")
}

pub(crate) fn head_name(layer: usize, part: &str) -> String {
    format!("head.{layer:02}.{part}")
}

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn init_uniform(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is non-empty")
}

/// All learnable parameters of a multi-exit encoder.
///
/// `body` holds embeddings and blocks; `heads` holds the exit heads behind
/// an `Arc` so a target encoder can share the frozen source heads. Only
/// [`EncoderBundle::clone_for_target`] shares them; `clone` copies everything.
#[derive(Debug)]
pub struct EncoderBundle<S: Scalar = f32> {
    config: EncoderConfig,
    body: ParamSet<S>,
    heads: Arc<ParamSet<S>>,
    frozen: bool,
}

impl<S: Scalar> Clone for EncoderBundle<S> {
    fn clone(&self) -> Self {
        EncoderBundle {
            config: self.config.clone(),
            body: self.body.clone(),
            heads: Arc::new((*self.heads).clone()),
            frozen: self.frozen,
        }
    }
}

pub fn init_encoder(config: &EncoderConfig, rng: &mut SeededRng) -> Result<EncoderBundle<f32>> {
    config.validate()?;
    let (d, ff, c) = (config.d_model, config.d_ff, config.num_classes);
    let mut body = ParamSet::new();
    body.push("embed.token", init_uniform(rng, &[config.vocab_size, d], d));
    if config.has_positions() {
        body.push("embed.position", init_uniform(rng, &[config.max_seq_len, d], d));
    }
    for layer in 0..config.num_layers {
        for &part in config.block_param_names() {
            let t = match part {
                "ln1.gain" | "ln2.gain" | "ln.gain" => Tensor::full(&[d], 1.0),
                "ln1.bias" | "ln2.bias" | "ln.bias" | "attn.output_bias" | "ffn.out_bias" => Tensor::zeros(&[d]),
                "ffn.in_bias" => Tensor::zeros(&[ff]),
                "attn.query" | "attn.key" | "attn.value" | "attn.output" => init_uniform(rng, &[d, d], d),
                "ffn.in" => init_uniform(rng, &[d, ff], d),
                "ffn.out" => init_uniform(rng, &[ff, d], ff),
                _ => unreachable!("unknown block parameter {part}"),
            };
            body.push(block_name(layer, part), t);
        }
    }
    let mut heads = ParamSet::new();
    for layer in 0..config.num_layers {
        heads.push(head_name(layer, "weight"), init_uniform(rng, &[d, c], d));
        heads.push(head_name(layer, "bias"), Tensor::zeros(&[c]));
    }
    Ok(EncoderBundle {
        config: config.clone(),
        body,
        heads: Arc::new(heads),
        frozen: false,
    })
}

/// Index and value of the largest entry; the first one wins ties.
pub fn argmax<S: Scalar>(p: &[S]) -> (usize, S) {
    let mut best = (0, p[0]);
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Per-layer pooled representations and exit probabilities for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutputs<S = f32> {
    pub pooled: Vec<Vec<S>>,
    pub probs: Vec<Vec<S>>,
}

/// Per-layer outputs for a batch: `pooled[i]` is `[batch, d_model]`,
/// `probs[i]` is `[batch, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutputs<S: Scalar = f32> {
    pub pooled: Vec<Tensor<S>>,
    pub probs: Vec<Tensor<S>>,
}

/// Token ids of several sequences flattened into one packed batch.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl PackedBatch {
    pub fn new<T: AsRef<[u32]>>(seqs: &[T], config: &EncoderConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let mut batch = PackedBatch {
            ids: Vec::new(),
            positions: Vec::new(),
            lengths: Vec::with_capacity(seqs.len()),
        };
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::input("empty token sequence"));
            }
            if s.len() > config.max_seq_len {
                return Err(Error::input(format!(
                    "sequence of length {} exceeds max_seq_len {}",
                    s.len(),
                    config.max_seq_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= config.vocab_size) {
                return Err(Error::input(format!(
                    "token id {bad} out of range for vocabulary of {}",
                    config.vocab_size
                )));
            }
            batch.ids.extend(s.iter().map(|&t| t as usize));
            batch.positions.extend(0..s.len());
            batch.lengths.push(s.len());
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    fn first_token_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.lengths.len());
        let mut at = 0;
        for &l in &self.lengths {
            rows.push(at);
            at += l;
        }
        rows
    }
}

/// Recorded outputs of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub pooled: Var,
    pub logits: Var,
    pub probs: Var,
}

/// An encoder whose parameters have been registered on a tape.
pub struct BoundEncoder<'c> {
    config: &'c EncoderConfig,
    body: Vec<Var>,
    heads: Vec<Var>,
}

impl<S: Scalar> EncoderBundle<S> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn body(&self) -> &ParamSet<S> {
        &self.body
    }

    pub fn heads(&self) -> &ParamSet<S> {
        &self.heads
    }

    /// True when `self` and `other` hold the very same head parameters.
    pub fn shares_heads_with(&self, other: &EncoderBundle<S>) -> bool {
        Arc::ptr_eq(&self.heads, &other.heads)
    }

    pub fn body_mut(&mut self) -> Result<&mut ParamSet<S>> {
        if self.frozen {
            return Err(Error::State("encoder is frozen".into()));
        }
        Ok(&mut self.body)
    }

    /// Mutable heads; fails when frozen or when the heads are shared.
    pub fn heads_mut(&mut self) -> Result<&mut ParamSet<S>> {
        if self.frozen {
            return Err(Error::State("encoder is frozen".into()));
        }
        Arc::get_mut(&mut self.heads).ok_or_else(|| Error::State("exit heads are shared with a frozen encoder".into()))
    }

    /// Body and heads together, for optimizers that update both.
    pub fn all_params_mut(&mut self) -> Result<(&mut ParamSet<S>, &mut ParamSet<S>)> {
        if self.frozen {
            return Err(Error::State("encoder is frozen".into()));
        }
        let heads = Arc::get_mut(&mut self.heads)
            .ok_or_else(|| Error::State("exit heads are shared with a frozen encoder".into()))?;
        Ok((&mut self.body, heads))
    }

    /// Hash over every parameter, body then heads.
    pub fn checksum(&self) -> u64 {
        let all: Vec<&Tensor<S>> = self.body.tensors().iter().chain(self.heads.tensors()).collect();
        crate::tensor::checksum(&all)
    }

    pub fn cast<T: Scalar>(&self) -> EncoderBundle<T> {
        EncoderBundle {
            config: self.config.clone(),
            body: self.body.cast(),
            heads: Arc::new(self.heads.cast()),
            frozen: self.frozen,
        }
    }

    /// Rebuilds a bundle from raw parameter sets (checkpoint loading, tests).
    pub fn from_parts(config: EncoderConfig, body: ParamSet<S>, heads: ParamSet<S>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let expected = expected_body_shapes(&config);
        let got: Vec<(&str, &[usize])> = body.iter().map(|(n, t)| (n, t.shape())).collect();
        let want: Vec<(&str, &[usize])> = expected.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
        if got != want {
            return Err(Error::Checkpoint("encoder body parameters do not match the configuration".into()));
        }
        let hexp = expected_head_shapes(&config);
        let hgot: Vec<(&str, &[usize])> = heads.iter().map(|(n, t)| (n, t.shape())).collect();
        let hwant: Vec<(&str, &[usize])> = hexp.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
        if hgot != hwant {
            return Err(Error::Checkpoint("exit head parameters do not match the configuration".into()));
        }
        Ok(EncoderBundle {
            config,
            body,
            heads: Arc::new(heads),
            frozen,
        })
    }

    /// Target encoder for adaptation: a deep copy of the body that shares
    /// this encoder's (frozen) exit heads.
    pub fn clone_for_target(&self) -> Result<EncoderBundle<S>> {
        if !self.frozen {
            return Err(Error::State(
                "source encoder must be trained and frozen before it can seed a target encoder".into(),
            ));
        }
        Ok(EncoderBundle {
            config: self.config.clone(),
            body: self.body.clone(),
            heads: Arc::clone(&self.heads),
            frozen: false,
        })
    }

    /// Registers the parameters on `tape`. Heads are differentiable only if
    /// `train_heads` is set; the body only if `train_body` is.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>, train_body: bool, train_heads: bool) -> BoundEncoder<'a> {
        BoundEncoder {
            config: &self.config,
            body: self.body.bind(tape, train_body),
            heads: self.heads.bind(tape, train_heads),
        }
    }

    /// Full forward pass of one sequence through all layers.
    pub fn encode(&self, token_ids: &[u32]) -> Result<LayerOutputs<S>> {
        let out = self.encode_batch(&[token_ids])?;
        Ok(LayerOutputs {
            pooled: out.pooled.iter().map(|t| t.row(0).to_vec()).collect(),
            probs: out.probs.iter().map(|t| t.row(0).to_vec()).collect(),
        })
    }

    /// Full forward pass of a batch, no gradients.
    pub fn encode_batch<T: AsRef<[u32]>>(&self, seqs: &[T]) -> Result<BatchOutputs<S>> {
        let batch = PackedBatch::new(seqs, &self.config)?;
        let mut tape = Tape::new();
        let enc = self.bind(&mut tape, false, false);
        let layers = enc.forward(&mut tape, &batch)?;
        Ok(BatchOutputs {
            pooled: layers.iter().map(|l| tape.value(l.pooled).clone()).collect(),
            probs: layers.iter().map(|l| tape.value(l.probs).clone()).collect(),
        })
    }
}

fn expected_body_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, ff) = (config.d_model, config.d_ff);
    let mut out = vec![("embed.token".to_string(), vec![config.vocab_size, d])];
    if config.has_positions() {
        out.push(("embed.position".to_string(), vec![config.max_seq_len, d]));
    }
    for layer in 0..config.num_layers {
        for &part in config.block_param_names() {
            let shape = match part {
                "ffn.in_bias" => vec![ff],
                "attn.query" | "attn.key" | "attn.value" | "attn.output" => vec![d, d],
                "ffn.in" => vec![d, ff],
                "ffn.out" => vec![ff, d],
                _ => vec![d],
            };
            out.push((block_name(layer, part), shape));
        }
    }
    out
}

fn expected_head_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    (0..config.num_layers)
        .flat_map(|l| {
            [
                (head_name(l, "weight"), vec![config.d_model, config.num_classes]),
                (head_name(l, "bias"), vec![config.num_classes]),
            ]
        })
        .collect()
}

impl<'c> BoundEncoder<'c> {
    pub fn config(&self) -> &EncoderConfig {
        self.config
    }

    /// Tape handles of the body parameters, in `ParamSet` order.
    pub fn body_vars(&self) -> &[Var] {
        &self.body
    }

    pub fn head_vars(&self) -> &[Var] {
        &self.heads
    }

    /// Token (and, for transformer blocks, position) embeddings: `[tokens, d]`.
    pub fn embed<S: Scalar>(&self, tape: &mut Tape<'_, S>, batch: &PackedBatch) -> Result<Var> {
        let tok = tape.gather_rows(self.body[0], &batch.ids)?;
        if self.config.has_positions() {
            let pos = tape.gather_rows(self.body[1], &batch.positions)?;
            tape.add(tok, pos)
        } else {
            Ok(tok)
        }
    }

    /// Applies block `layer` (0-based) to hidden states `h`.
    pub fn block<S: Scalar>(&self, tape: &mut Tape<'_, S>, layer: usize, h: Var, batch: &PackedBatch) -> Result<Var> {
        let per = self.config.block_param_names().len();
        let first = if self.config.has_positions() { 2 } else { 1 };
        let p = &self.body[first + layer * per..first + (layer + 1) * per];
        match self.config.block_kind {
            BlockKind::Transformer => {
                let q = tape.matmul(h, p[2])?;
                let k = tape.matmul(h, p[3])?;
                let v = tape.matmul(h, p[4])?;
                let a = tape.attention(q, k, v, &batch.lengths, self.config.n_heads)?;
                let o = tape.matmul(a, p[5])?;
                let o = tape.add_bias(o, p[6])?;
                let r = tape.add(h, o)?;
                let h = tape.layer_norm(r, p[0], p[1])?;
                let f = self.ffn(tape, h, &p[9..13])?;
                let r = tape.add(h, f)?;
                tape.layer_norm(r, p[7], p[8])
            }
            BlockKind::FfnOnly => {
                let f = self.ffn(tape, h, &p[2..6])?;
                let r = tape.add(h, f)?;
                tape.layer_norm(r, p[0], p[1])
            }
        }
    }

    fn ffn<S: Scalar>(&self, tape: &mut Tape<'_, S>, h: Var, w: &[Var]) -> Result<Var> {
        let u = tape.matmul(h, w[0])?;
        let u = tape.add_bias(u, w[1])?;
        let u = tape.gelu(u)?;
        let o = tape.matmul(u, w[2])?;
        tape.add_bias(o, w[3])
    }

    pub fn pool<S: Scalar>(&self, tape: &mut Tape<'_, S>, h: Var, batch: &PackedBatch) -> Result<Var> {
        match self.config.pooling {
            Pooling::Mean => tape.segment_mean(h, &batch.lengths),
            Pooling::FirstToken => tape.gather_rows(h, &batch.first_token_rows()),
        }
    }

    /// Exit head `layer`: logits and probabilities for pooled features.
    pub fn head<S: Scalar>(&self, tape: &mut Tape<'_, S>, layer: usize, pooled: Var) -> Result<(Var, Var)> {
        let z = tape.matmul(pooled, self.heads[2 * layer])?;
        let logits = tape.add_bias(z, self.heads[2 * layer + 1])?;
        let probs = tape.softmax(logits)?;
        Ok((logits, probs))
    }

    /// Runs every layer and exit head.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, batch: &PackedBatch) -> Result<Vec<LayerVars>> {
        let mut h = self.embed(tape, batch)?;
        let mut out = Vec::with_capacity(self.config.num_layers);
        for layer in 0..self.config.num_layers {
            h = self.block(tape, layer, h, batch)?;
            let pooled = self.pool(tape, h, batch)?;
            let (logits, probs) = self.head(tape, layer, pooled)?;
            out.push(LayerVars { pooled, logits, probs });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: BlockKind) -> EncoderConfig {
        EncoderConfig {
            num_layers: 3,
            d_model: 8,
            block_kind: kind,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 20,
            max_seq_len: 10,
            num_classes: 3,
            pooling: Pooling::Mean,
        }
    }

    #[test]
    fn config_validation_names_field() {
        let mut c = small(BlockKind::Transformer);
        c.n_heads = 3;
        assert!(init_encoder(&c, &mut SeededRng::new(0)).unwrap_err().to_string().contains("n_heads"));
        let mut c = small(BlockKind::FfnOnly);
        c.num_layers = 1;
        assert!(init_encoder(&c, &mut SeededRng::new(0)).unwrap_err().to_string().contains("num_layers"));
    }

    #[test]
    fn default_shape_bookkeeping() {
        let c = EncoderConfig { vocab_size: 30, ..EncoderConfig::default() };
        let b = init_encoder(&c, &mut SeededRng::new(1)).unwrap();
        assert_eq!(b.heads().len(), 12);
        for l in 0..6 {
            assert_eq!(b.heads().get(2 * l).shape(), &[64, 2]);
        }
    }

    #[test]
    fn same_seed_same_bundle() {
        let c = small(BlockKind::Transformer);
        let a = init_encoder(&c, &mut SeededRng::new(5)).unwrap();
        let b = init_encoder(&c, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a.body(), b.body());
        assert_eq!(a.heads(), b.heads());
    }

    #[test]
    fn outputs_are_distributions() {
        for kind in [BlockKind::Transformer, BlockKind::FfnOnly] {
            let b = init_encoder(&small(kind), &mut SeededRng::new(2)).unwrap();
            let out = b.encode(&[1, 4, 7, 2]).unwrap();
            assert_eq!(out.pooled.len(), 3);
            for p in &out.probs {
                assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn mean_pooling_with_ffn_blocks_ignores_order() {
        let b = init_encoder(&small(BlockKind::FfnOnly), &mut SeededRng::new(3)).unwrap();
        let x = b.encode(&[1, 2, 3, 4]).unwrap();
        let y = b.encode(&[4, 2, 1, 3]).unwrap();
        for (u, v) in x.pooled[0].iter().zip(&y.pooled[0]) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn batched_and_single_encoding_agree_bitwise() {
        let b = init_encoder(&small(BlockKind::Transformer), &mut SeededRng::new(4)).unwrap();
        let seqs: Vec<Vec<u32>> = vec![vec![1, 2, 3], vec![5], vec![7, 8, 9, 10, 11]];
        let batch = b.encode_batch(&seqs).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let one = b.encode(s).unwrap();
            for l in 0..3 {
                assert_eq!(batch.probs[l].row(i), one.probs[l].as_slice());
                assert_eq!(batch.pooled[l].row(i), one.pooled[l].as_slice());
            }
        }
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let b = init_encoder(&small(BlockKind::FfnOnly), &mut SeededRng::new(0)).unwrap();
        assert!(b.encode(&[]).is_err());
        assert!(b.encode(&[25]).is_err());
        assert!(b.encode(&[1; 11]).is_err());
    }

    #[test]
    fn clone_for_target_requires_frozen_source() {
        let mut src = init_encoder(&small(BlockKind::FfnOnly), &mut SeededRng::new(0)).unwrap();
        assert!(src.clone_for_target().is_err());
        src.freeze();
        let mut tgt = src.clone_for_target().unwrap();
        assert!(tgt.shares_heads_with(&src));
        assert!(!tgt.is_frozen());
        assert!(tgt.heads_mut().is_err(), "shared heads must stay immutable");
        let x = [3u32, 1, 4, 1, 5];
        assert_eq!(src.encode(&x).unwrap(), tgt.encode(&x).unwrap());
        let before = src.encode(&x).unwrap();
        tgt.body_mut().unwrap().tensors_mut()[1].data_mut()[0] += 1.0;
        assert_eq!(src.encode(&x).unwrap(), before);
        assert_ne!(tgt.encode(&x).unwrap(), before);
    }

    #[test]
    fn frozen_bundle_refuses_mutation() {
        let mut b = init_encoder(&small(BlockKind::FfnOnly), &mut SeededRng::new(0)).unwrap();
        b.freeze();
        assert!(b.body_mut().is_err());
        assert!(b.heads_mut().is_err());
        assert!(b.all_params_mut().is_err());
    }

    #[test]
    fn first_token_pooling_uses_first_row() {
        let mut c = small(BlockKind::FfnOnly);
        c.pooling = Pooling::FirstToken;
        let b = init_encoder(&c, &mut SeededRng::new(0)).unwrap();
        let a = b.encode(&[3, 1, 2]).unwrap();
        let single = b.encode(&[3]).unwrap();
        // Position-free blocks: the first token's state does not depend on the rest.
        assert_eq!(a.pooled, single.pooled);
    }
}
