use serde::{Deserialize, Serialize};

use super::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters. Betas and epsilon default to the usual values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Per-parameter moment estimates for one group of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar = f32> {
    config: AdamConfig,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new<'p>(config: AdamConfig, params: impl IntoIterator<Item = &'p Tensor<S>>) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        let first: Vec<Tensor<S>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = first.clone();
        Ok(AdamState {
            config,
            first,
            second,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one bias-corrected Adam update in place.
    pub fn step<'p>(&mut self, params: impl IntoIterator<Item = &'p mut Tensor<S>>, grads: &[Tensor<S>]) -> Result<()> {
        let mut params: Vec<&mut Tensor<S>> = params.into_iter().collect();
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![self.first.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (lit::<S>(c.beta1), lit::<S>(c.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let bc1 = lit::<S>(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = lit::<S>(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (lit::<S>(c.lr), lit::<S>(c.eps));
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
