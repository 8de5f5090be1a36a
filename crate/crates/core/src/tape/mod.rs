//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append their output as a new node and, when any input is connected to a
//! parameter, record a replayable step. [`Tape::backward`] walks the recorded
//! steps once, in reverse order, accumulating adjoints.
//!
//! Training builds a fresh tape per batch; a tape whose backward has run is
//! spent, and a second backward is a state error.

mod linalg;
mod loss;
mod norm;
mod spatial;

pub use linalg::{matmul_acc, matmul_transa_acc, matmul_transb_acc};

use crate::error::{Error, Result};
use crate::scalar::Element;
use crate::tensor::Tensor;

/// Handle to a tensor stored on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Spatial padding mode for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// Output spatial size is `ceil(in / stride)`; input is zero-padded.
    Same,
    /// No padding; output spatial size is `floor((in - k) / stride) + 1`.
    Valid,
}

impl std::fmt::Display for Padding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Padding::Same => write!(f, "same"),
            Padding::Valid => write!(f, "valid"),
        }
    }
}

pub(crate) enum Step<E: Element> {
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        out: TensorId,
        stride: usize,
        padding: Padding,
    },
    Upsample2x {
        x: TensorId,
        out: TensorId,
    },
    Relu {
        x: TensorId,
        out: TensorId,
    },
    Sigmoid {
        x: TensorId,
        out: TensorId,
    },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        out: TensorId,
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        out: TensorId,
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    MaxPool2x2 {
        x: TensorId,
        out: TensorId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: TensorId,
        out: TensorId,
    },
    Flatten {
        x: TensorId,
        out: TensorId,
    },
    Dense {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Softmax {
        x: TensorId,
        out: TensorId,
    },
    Mse {
        pred: TensorId,
        target: TensorId,
        out: TensorId,
    },
    CrossEntropyLogits {
        logits: TensorId,
        out: TensorId,
        probs: Vec<E>,
        targets: Vec<usize>,
    },
    Sum {
        x: TensorId,
        out: TensorId,
    },
}

pub struct Tape<E: Element = f32> {
    values: Vec<Tensor<E>>,
    requires_grad: Vec<bool>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Tensor<E>>>,
    steps: Vec<Step<E>>,
    backward_done: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            requires_grad: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            steps: Vec::new(),
            backward_done: false,
        }
    }

    /// Registers a leaf tensor. Gradients are accumulated for it during
    /// backward iff `requires_grad` is set.
    pub fn input(&mut self, value: Tensor<E>, requires_grad: bool) -> TensorId {
        self.push_node(value, requires_grad, requires_grad)
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<E>) -> TensorId {
        self.input(value, false)
    }

    fn push_node(&mut self, value: Tensor<E>, requires_grad: bool, needs_grad: bool) -> TensorId {
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        TensorId(self.values.len() - 1)
    }

    /// Appends an op output node; it participates in backward iff any of
    /// `inputs` does.
    fn push_output(&mut self, value: Tensor<E>, inputs: &[TensorId]) -> (TensorId, bool) {
        let needs = inputs.iter().any(|id| self.needs_grad[id.0]);
        (self.push_node(value, false, needs), needs)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }

    /// The gradient of `id`, or zeros when it is disconnected from the loss.
    pub fn grad_or_zeros(&self, id: TensorId) -> Tensor<E> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.values[id.0].shape()),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub(crate) fn record(&mut self, step: Step<E>) {
        self.steps.push(step);
    }

    fn accumulate(&mut self, id: TensorId, contribution: Tensor<E>) {
        debug_assert_eq!(self.values[id.0].shape(), contribution.shape());
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gv, cv) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *gv += *cv;
                }
            }
            None => self.grads[id.0] = Some(contribution),
        }
    }

    fn grad_slot(&mut self, id: TensorId) -> &mut [E] {
        if self.grads[id.0].is_none() {
            self.grads[id.0] = Some(Tensor::zeros(self.values[id.0].shape()));
        }
        self.grads[id.0].as_mut().unwrap().data_mut()
    }

    /// Runs the reverse pass from a scalar loss, visiting each recorded step
    /// exactly once in reverse execution order.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; build a fresh tape per forward pass".into(),
            ));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor::filled(self.values[loss.0].shape(), E::ONE));

        let steps = std::mem::take(&mut self.steps);
        for step in steps.iter().rev() {
            self.replay(step);
        }
        self.steps = steps;
        Ok(())
    }

    fn replay(&mut self, step: &Step<E>) {
        match step {
            Step::Relu { x, out } => {
                let Some(g) = self.grads[out.0].take() else {
                    return;
                };
                if self.needs_grad[x.0] {
                    let xv = &self.values[x.0];
                    let contrib = Tensor::from_parts(
                        xv.shape().to_vec(),
                        xv.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&xi, &gi)| if xi > E::ZERO { gi } else { E::ZERO })
                            .collect(),
                    );
                    self.accumulate(*x, contrib);
                }
                self.grads[out.0] = Some(g);
            }
            Step::Sigmoid { x, out } => {
                let Some(g) = self.grads[out.0].take() else {
                    return;
                };
                if self.needs_grad[x.0] {
                    let yv = &self.values[out.0];
                    let contrib = Tensor::from_parts(
                        yv.shape().to_vec(),
                        yv.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&yi, &gi)| gi * yi * (E::ONE - yi))
                            .collect(),
                    );
                    self.accumulate(*x, contrib);
                }
                self.grads[out.0] = Some(g);
            }
            Step::Flatten { x, out } => {
                let Some(g) = self.grads[out.0].take() else {
                    return;
                };
                if self.needs_grad[x.0] {
                    let shape = self.values[x.0].shape().to_vec();
                    let contrib = Tensor::from_parts(shape, g.data().to_vec());
                    self.accumulate(*x, contrib);
                }
                self.grads[out.0] = Some(g);
            }
            Step::Add { a, b, out } => {
                let Some(g) = self.grads[out.0].take() else {
                    return;
                };
                if self.needs_grad[a.0] {
                    self.accumulate(*a, g.clone());
                }
                if self.needs_grad[b.0] {
                    self.accumulate(*b, g.clone());
                }
                self.grads[out.0] = Some(g);
            }
            Step::Sum { x, out } => {
                let Some(g) = self.grads[out.0].take() else {
                    return;
                };
                if self.needs_grad[x.0] {
                    let gv = g.data()[0];
                    let contrib = Tensor::filled(self.values[x.0].shape(), gv);
                    self.accumulate(*x, contrib);
                }
                self.grads[out.0] = Some(g);
            }
            Step::Softmax { x, out } => {
                let Some(g) = self.grads[out.0].take() else {
                    return;
                };
                if self.needs_grad[x.0] {
                    let y = &self.values[out.0];
                    let (rows, cols) = y.dims2().expect("softmax output is 2-d");
                    let mut dx = vec![E::ZERO; rows * cols];
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: E = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    let contrib = Tensor::from_parts(y.shape().to_vec(), dx);
                    self.accumulate(*x, contrib);
                }
                self.grads[out.0] = Some(g);
            }
            Step::Conv2d {
                x,
                w,
                b,
                out,
                stride,
                padding,
            } => self.conv2d_backward(*x, *w, *b, *out, *stride, *padding),
            Step::Upsample2x { x, out } => self.upsample2x_backward(*x, *out),
            Step::MaxPool2x2 { x, out, argmax } => self.max_pool2x2_backward(*x, *out, argmax),
            Step::GlobalAvgPool { x, out } => self.global_avg_pool_backward(*x, *out),
            Step::Dense { x, w, b, out } => self.dense_backward(*x, *w, *b, *out),
            Step::BatchNormTrain {
                x,
                gamma,
                beta,
                out,
                mean,
                inv_std,
            } => self.batchnorm_train_backward(*x, *gamma, *beta, *out, mean, inv_std),
            Step::BatchNormEval {
                x,
                gamma,
                beta,
                out,
                mean,
                inv_std,
            } => self.batchnorm_eval_backward(*x, *gamma, *beta, *out, mean, inv_std),
            Step::Mse { pred, target, out } => self.mse_backward(*pred, *target, *out),
            Step::CrossEntropyLogits {
                logits,
                out,
                probs,
                targets,
            } => self.cross_entropy_backward(*logits, *out, probs, targets),
        }
    }

    // ---- elementwise / structural forward ops ----

    /// `max(0, x)` elementwise.
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let value = self.values[x.0].map(|v| v.maximum(E::ZERO));
        let (out, needs) = self.push_output(value, &[x]);
        if needs {
            self.record(Step::Relu { x, out });
        }
        out
    }

    /// Logistic sigmoid elementwise.
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let value = self.values[x.0].map(|v| E::ONE / (E::ONE + (-v).exp()));
        let (out, needs) = self.push_output(value, &[x]);
        if needs {
            self.record(Step::Sigmoid { x, out });
        }
        out
    }

    /// Collapses an `[N, C, H, W]` tensor to `[N, C*H*W]`.
    pub fn flatten(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.values[x.0].dims4()?;
        let value = self.values[x.0].reshape(&[n, c * h * w])?;
        let (out, needs) = self.push_output(value, &[x]);
        if needs {
            self.record(Step::Flatten { x, out });
        }
        Ok(out)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if !self.values[a.0].same_shape(&self.values[b.0]) {
            return Err(Error::Dimension(format!(
                "add shapes differ: {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&av, &bv)| av + bv)
            .collect();
        let value = Tensor::from_parts(self.values[a.0].shape().to_vec(), data);
        let (out, needs) = self.push_output(value, &[a, b]);
        if needs {
            self.record(Step::Add { a, b, out });
        }
        Ok(out)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: E = self.values[x.0].data().iter().copied().sum();
        let (out, needs) = self.push_output(Tensor::scalar(total), &[x]);
        if needs {
            self.record(Step::Sum { x, out });
        }
        out
    }
}

#[cfg(test)]
mod tests;
