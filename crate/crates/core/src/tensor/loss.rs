//! Loss functions, both on plain values and recorded on a [`Tape`].
//!
//! Every log is taken of a probability clamped to at least [`PROB_FLOOR`].

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a log.
pub const PROB_FLOOR: f64 = 1e-7;

const SIMPLEX_TOL: f64 = 1e-5;

fn check_simplex(name: &str, p: &[f64]) -> Result<()> {
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|&v| !(0.0..=1.0 + SIMPLEX_TOL).contains(&v)) {
        return Err(Error::input(format!("{name}: not a probability vector (sum {total})")));
    }
    Ok(())
}

/// `-ln p[label]` for a probability vector.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    check_simplex("cross_entropy", probs)?;
    let p = probs
        .get(label)
        .ok_or_else(|| Error::input(format!("cross_entropy: label {label} out of range for {} classes", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// `KL(p || q) = sum p ln(p / q)` with `q` clamped below.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    check_simplex("kl_divergence", p)?;
    check_simplex("kl_divergence", q)?;
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum())
}

/// Batch-mean cross-entropy from logits `[batch, classes]`, via log-softmax.
pub fn cross_entropy_logits<S: Scalar>(tape: &mut Tape<'_, S>, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, labels)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

/// Batch-mean `KL(reference || q)` over rows, where `reference` carries no
/// gradient and `q` is a recorded probability matrix.
pub fn kl_rows<S: Scalar>(tape: &mut Tape<'_, S>, reference: &Tensor<S>, q: Var) -> Result<Var> {
    if reference.shape() != tape.value(q).shape() {
        return Err(Error::Shape {
            op: "kl_rows",
            lhs: reference.shape().to_vec(),
            rhs: tape.value(q).shape().to_vec(),
        });
    }
    let floor = S::from_f64(PROB_FLOOR);
    let log_ref = reference.map(|v| v.max(floor).ln());
    let p = tape.constant(reference.clone());
    let lp = tape.constant(log_ref);
    let qc = tape.clamp(q, PROB_FLOOR, f64::INFINITY)?;
    let lq = tape.log(qc)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let rows = tape.sum_axis(terms, 1)?;
    tape.mean(rows)
}

/// Batch mean of `-ln x` for a column of probabilities.
pub fn neg_log_mean<S: Scalar>(tape: &mut Tape<'_, S>, probs: Var) -> Result<Var> {
    let l = tape.log(probs)?;
    let m = tape.mean(l)?;
    tape.scale(m, -1.0)
}

/// Batch mean of `-ln(1 - x)` for a column of probabilities.
pub fn neg_log_complement_mean<S: Scalar>(tape: &mut Tape<'_, S>, probs: Var) -> Result<Var> {
    let c = tape.affine(probs, -1.0, 1.0)?;
    neg_log_mean(tape, c)
}
