//! SGD and Adam with an optional cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Element;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        weight_decay: f64,
        /// 0.0 disables the velocity buffer entirely.
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig::Sgd {
            lr,
            weight_decay,
            momentum: 0.0,
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn base_lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }
}

enum Slot<E> {
    Empty,
    Velocity(Vec<E>),
    Moments { m: Vec<E>, v: Vec<E> },
}

pub struct Optimizer<E: Element = f32> {
    config: OptimizerConfig,
    lr: f64,
    steps: u64,
    slots: Vec<Slot<E>>,
}

impl<E: Element> Optimizer<E> {
    pub fn new(config: OptimizerConfig) -> Self {
        let lr = config.base_lr();
        Self {
            config,
            lr,
            steps: 0,
            slots: Vec::new(),
        }
    }

    /// Current learning rate, which a schedule may have overridden.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Number of completed update calls.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update to every parameter in place. `grads[i]` must match
    /// `params[i]` in shape; the pairing is positional, so callers must pass
    /// parameters in a stable order across steps.
    pub fn step(&mut self, params: &mut [Tensor<E>], grads: &[Tensor<E>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.slots.is_empty() {
            self.slots = params.iter().map(|_| Slot::Empty).collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer was created over {} params, now given {}",
                self.slots.len(),
                params.len()
            )));
        }
        for (param, grad) in params.iter().zip(grads) {
            if !param.same_shape(grad) {
                return Err(Error::Dimension(format!(
                    "param shape {:?} does not match grad shape {:?}",
                    param.shape(),
                    grad.shape()
                )));
            }
        }
        self.steps += 1;
        let lr = E::from_f64(self.lr);

        match self.config {
            OptimizerConfig::Sgd {
                weight_decay,
                momentum,
                ..
            } => {
                let wd = E::from_f64(weight_decay);
                let mu = E::from_f64(momentum);
                for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
                    let w = param.data_mut();
                    let g = grad.data();
                    if momentum == 0.0 {
                        for (wv, &gv) in w.iter_mut().zip(g) {
                            *wv -= lr * (gv + wd * *wv);
                        }
                    } else {
                        if matches!(slot, Slot::Empty) {
                            *slot = Slot::Velocity(vec![E::ZERO; w.len()]);
                        }
                        let Slot::Velocity(vel) = slot else {
                            return Err(Error::State("optimizer slot kind changed".into()));
                        };
                        for ((wv, &gv), vv) in w.iter_mut().zip(g).zip(vel.iter_mut()) {
                            *vv = mu * *vv + gv + wd * *wv;
                            *wv -= lr * *vv;
                        }
                    }
                }
            }
            OptimizerConfig::Adam {
                weight_decay,
                beta1,
                beta2,
                eps,
                ..
            } => {
                let wd = E::from_f64(weight_decay);
                let b1 = E::from_f64(beta1);
                let b2 = E::from_f64(beta2);
                let eps = E::from_f64(eps);
                let t = self.steps as i32;
                let corr1 = E::from_f64(1.0 - beta1.powi(t));
                let corr2 = E::from_f64(1.0 - beta2.powi(t));
                for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
                    let w = param.data_mut();
                    let g = grad.data();
                    if matches!(slot, Slot::Empty) {
                        *slot = Slot::Moments {
                            m: vec![E::ZERO; w.len()],
                            v: vec![E::ZERO; w.len()],
                        };
                    }
                    let Slot::Moments { m, v } = slot else {
                        return Err(Error::State("optimizer slot kind changed".into()));
                    };
                    for (((wv, &gv), mv), vv) in
                        w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let gd = gv + wd * *wv;
                        *mv = b1 * *mv + (E::ONE - b1) * gd;
                        *vv = b2 * *vv + (E::ONE - b2) * gd * gd;
                        let mhat = *mv / corr1;
                        let vhat = *vv / corr2;
                        *wv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at epoch 0 down to 0 at `total_epochs`.
pub fn cosine_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base;
    }
    let frac = epoch as f64 / total_epochs as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
