//! Runs a parsed model on a tape.
//!
//! [`ModelParams`] owns the trainable tensors and batchnorm running buffers
//! in the order forward consumes them. Layer ranges can execute on their own
//! so a frozen feature extractor and a trainable head can share one spec.

use crate::error::{Error, Result};
use crate::model::{Activation, InputSpec, LayerSpec, ModelSpec};
use crate::rng::{seed_rng, uniform_range, Rng};
use crate::scalar::Element;
use crate::tape::{Padding, Tape, TensorId};
use crate::tensor::Tensor;
use std::ops::Range;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) enum ParamKind {
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
}

pub(crate) struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

pub(crate) struct Layout {
    pub slots: Vec<ParamSlot>,
    pub bn_channels: Vec<(String, usize)>,
    /// Index of the first param of each layer, plus a trailing total.
    pub param_offsets: Vec<usize>,
    pub bn_offsets: Vec<usize>,
}

fn input_activation(input: InputSpec) -> Activation {
    Activation::Spatial {
        c: input.channels,
        h: input.height,
        w: input.width,
    }
}

pub(crate) fn layout(spec: &ModelSpec) -> Result<Layout> {
    let shapes = spec.output_shapes()?;
    let mut slots = Vec::new();
    let mut bn_channels = Vec::new();
    let mut param_offsets = vec![0usize];
    let mut bn_offsets = vec![0usize];
    for (i, layer) in spec.layers.iter().enumerate() {
        let before = if i == 0 {
            input_activation(spec.input)
        } else {
            shapes[i - 1]
        };
        match (*layer, before) {
            (
                LayerSpec::Conv {
                    filters, kernel, ..
                },
                Activation::Spatial { c, .. },
            ) => {
                push_conv(&mut slots, &format!("l{i}.conv"), filters, c, kernel);
            }
            (LayerSpec::BatchNorm, Activation::Spatial { c, .. }) => {
                push_bn(&mut slots, &mut bn_channels, &format!("l{i}.bn"), c);
            }
            (LayerSpec::Dense { units }, Activation::Flat { d }) => {
                slots.push(ParamSlot {
                    name: format!("l{i}.dense.w"),
                    shape: vec![d, units],
                    kind: ParamKind::Weight { fan_in: d },
                });
                slots.push(ParamSlot {
                    name: format!("l{i}.dense.b"),
                    shape: vec![units],
                    kind: ParamKind::Bias,
                });
            }
            (LayerSpec::ResBlock { filters, stride }, Activation::Spatial { c, .. }) => {
                push_conv(&mut slots, &format!("l{i}.conv1"), filters, c, 3);
                push_bn(&mut slots, &mut bn_channels, &format!("l{i}.bn1"), filters);
                push_conv(&mut slots, &format!("l{i}.conv2"), filters, filters, 3);
                push_bn(&mut slots, &mut bn_channels, &format!("l{i}.bn2"), filters);
                if c != filters || stride != 1 {
                    push_conv(&mut slots, &format!("l{i}.proj"), filters, c, 1);
                    push_bn(&mut slots, &mut bn_channels, &format!("l{i}.projbn"), filters);
                }
            }
            _ => {}
        }
        param_offsets.push(slots.len());
        bn_offsets.push(bn_channels.len());
    }
    Ok(Layout {
        slots,
        bn_channels,
        param_offsets,
        bn_offsets,
    })
}

fn push_conv(slots: &mut Vec<ParamSlot>, base: &str, filters: usize, c: usize, kernel: usize) {
    slots.push(ParamSlot {
        name: format!("{base}.w"),
        shape: vec![filters, c, kernel, kernel],
        kind: ParamKind::Weight {
            fan_in: c * kernel * kernel,
        },
    });
    slots.push(ParamSlot {
        name: format!("{base}.b"),
        shape: vec![filters],
        kind: ParamKind::Bias,
    });
}

fn push_bn(
    slots: &mut Vec<ParamSlot>,
    bn_channels: &mut Vec<(String, usize)>,
    base: &str,
    c: usize,
) {
    slots.push(ParamSlot {
        name: format!("{base}.gamma"),
        shape: vec![c],
        kind: ParamKind::Gamma,
    });
    slots.push(ParamSlot {
        name: format!("{base}.beta"),
        shape: vec![c],
        kind: ParamKind::Beta,
    });
    bn_channels.push((base.to_string(), c));
}

/// Result of one forward execution.
pub struct Forward {
    pub output: TensorId,
    /// `(tensor index, tape id)` for every parameter the range touched.
    pub param_ids: Vec<(usize, TensorId)>,
}

#[derive(Clone)]
pub struct ModelParams<E: Element = f32> {
    pub spec: ModelSpec,
    pub tensors: Vec<Tensor<E>>,
    pub names: Vec<String>,
    pub bn_mean: Vec<Vec<E>>,
    pub bn_var: Vec<Vec<E>>,
    pub bn_names: Vec<String>,
    param_offsets: Vec<usize>,
    bn_offsets: Vec<usize>,
}

impl<E: Element> ModelParams<E> {
    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`), zero biases,
    /// unit gamma, zero beta, and fresh running stats, all drawn from one
    /// seeded stream in layer order.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let layout = layout(&spec)?;
        let mut rng = seed_rng(seed);
        let mut tensors = Vec::with_capacity(layout.slots.len());
        let mut names = Vec::with_capacity(layout.slots.len());
        for slot in &layout.slots {
            let tensor = match slot.kind {
                ParamKind::Weight { fan_in } => kaiming_uniform(&mut rng, &slot.shape, fan_in),
                ParamKind::Bias | ParamKind::Beta => Tensor::zeros(&slot.shape),
                ParamKind::Gamma => Tensor::filled(&slot.shape, E::ONE),
            };
            tensors.push(tensor);
            names.push(slot.name.clone());
        }
        let bn_mean = layout
            .bn_channels
            .iter()
            .map(|(_, c)| vec![E::ZERO; *c])
            .collect();
        let bn_var = layout
            .bn_channels
            .iter()
            .map(|(_, c)| vec![E::ONE; *c])
            .collect();
        let bn_names = layout.bn_channels.iter().map(|(n, _)| n.clone()).collect();
        Ok(Self {
            spec,
            tensors,
            names,
            bn_mean,
            bn_var,
            bn_names,
            param_offsets: layout.param_offsets,
            bn_offsets: layout.bn_offsets,
        })
    }

    /// Rebuilds the bookkeeping for tensors loaded from a checkpoint. The
    /// tensors must match the spec's layout exactly, by name and shape.
    pub fn from_saved(
        spec: ModelSpec,
        named: Vec<(String, Tensor<E>)>,
        bn: Vec<(String, Vec<E>, Vec<E>)>,
    ) -> Result<Self> {
        let layout = layout(&spec)?;
        if named.len() != layout.slots.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.slots.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        let mut names = Vec::with_capacity(named.len());
        for (slot, (name, tensor)) in layout.slots.iter().zip(named) {
            if slot.name != name {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' where '{}' was expected",
                    slot.name
                )));
            }
            if slot.shape != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape
                )));
            }
            tensors.push(tensor);
            names.push(name);
        }
        if bn.len() != layout.bn_channels.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} batchnorm buffers, found {}",
                layout.bn_channels.len(),
                bn.len()
            )));
        }
        let mut bn_mean = Vec::new();
        let mut bn_var = Vec::new();
        let mut bn_names = Vec::new();
        for ((name, c), (got_name, mean, var)) in layout.bn_channels.iter().zip(bn) {
            if *name != got_name || mean.len() != *c || var.len() != *c {
                return Err(Error::Checkpoint(format!(
                    "batchnorm buffer '{got_name}' does not match layout entry '{name}'"
                )));
            }
            bn_mean.push(mean);
            bn_var.push(var);
            bn_names.push(got_name);
        }
        Ok(Self {
            spec,
            tensors,
            names,
            bn_mean,
            bn_var,
            bn_names,
            param_offsets: layout.param_offsets,
            bn_offsets: layout.bn_offsets,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Param tensor indices owned by layers in `range`.
    pub fn params_in_layers(&self, range: Range<usize>) -> Range<usize> {
        self.param_offsets[range.start]..self.param_offsets[range.end]
    }

    /// Batchnorm buffer indices owned by layers in `range`.
    pub fn bn_in_layers(&self, range: Range<usize>) -> Range<usize> {
        self.bn_offsets[range.start]..self.bn_offsets[range.end]
    }

    /// Copies parameters and running stats for the first `layers` layers
    /// from another model whose spec agrees on that prefix.
    pub fn copy_prefix_from(&mut self, other: &ModelParams<E>, layers: usize) -> Result<()> {
        if layers > self.spec.layers.len() || layers > other.spec.layers.len() {
            return Err(Error::Dimension(format!(
                "prefix of {layers} layers exceeds the model depth"
            )));
        }
        if self.spec.input != other.spec.input
            || self.spec.layers[..layers] != other.spec.layers[..layers]
        {
            return Err(Error::SpecMismatch(format!(
                "models disagree within the first {layers} layers"
            )));
        }
        let params = self.params_in_layers(0..layers);
        for i in params {
            self.tensors[i] = other.tensors[i].clone();
        }
        let bns = self.bn_in_layers(0..layers);
        for i in bns {
            self.bn_mean[i] = other.bn_mean[i].clone();
            self.bn_var[i] = other.bn_var[i].clone();
        }
        Ok(())
    }

    /// Full forward pass.
    pub fn forward(
        &mut self,
        tape: &mut Tape<E>,
        x: TensorId,
        mode: Mode,
        frozen_prefix: usize,
    ) -> Result<Forward> {
        let end = self.spec.layers.len();
        self.forward_range(tape, x, mode, 0..end, frozen_prefix)
    }

    /// Forward pass skipping a trailing softmax, so losses see raw logits.
    pub fn forward_logits(
        &mut self,
        tape: &mut Tape<E>,
        x: TensorId,
        mode: Mode,
        frozen_prefix: usize,
    ) -> Result<Forward> {
        let mut end = self.spec.layers.len();
        if self.spec.has_trailing_softmax() {
            end -= 1;
        }
        self.forward_range(tape, x, mode, 0..end, frozen_prefix)
    }

    /// Executes layers `range.start..range.end` on `x`, which must already
    /// have the activation shape entering `range.start`. Layers with index
    /// below `frozen_prefix` run in inference mode with constant parameters
    /// regardless of `mode`.
    pub fn forward_range(
        &mut self,
        tape: &mut Tape<E>,
        x: TensorId,
        mode: Mode,
        range: Range<usize>,
        frozen_prefix: usize,
    ) -> Result<Forward> {
        if range.end > self.spec.layers.len() || range.start > range.end {
            return Err(Error::Dimension(format!(
                "layer range {range:?} out of bounds for {} layers",
                self.spec.layers.len()
            )));
        }
        let mut p = self.param_offsets[range.start];
        let mut b = self.bn_offsets[range.start];
        let mut param_ids = Vec::new();
        let mut cur = x;
        let momentum = E::from_f64(BN_MOMENTUM);
        let eps = E::from_f64(BN_EPS);

        for i in range.clone() {
            let frozen = i < frozen_prefix;
            let trainable = mode == Mode::Train && !frozen;
            let take = |tape: &mut Tape<E>,
                            tensors: &[Tensor<E>],
                            p: &mut usize,
                            ids: &mut Vec<(usize, TensorId)>| {
                let id = tape.input(tensors[*p].clone(), trainable);
                ids.push((*p, id));
                *p += 1;
                id
            };
            match self.spec.layers[i] {
                LayerSpec::Conv { stride, padding, .. } => {
                    let w = take(tape, &self.tensors, &mut p, &mut param_ids);
                    let bias = take(tape, &self.tensors, &mut p, &mut param_ids);
                    cur = tape.conv2d(cur, w, bias, stride, padding)?;
                }
                LayerSpec::BatchNorm => {
                    let gamma = take(tape, &self.tensors, &mut p, &mut param_ids);
                    let beta = take(tape, &self.tensors, &mut p, &mut param_ids);
                    cur = if trainable {
                        tape.batchnorm_train(
                            cur,
                            gamma,
                            beta,
                            &mut self.bn_mean[b],
                            &mut self.bn_var[b],
                            momentum,
                            eps,
                        )?
                    } else {
                        tape.batchnorm_eval(
                            cur,
                            gamma,
                            beta,
                            &self.bn_mean[b],
                            &self.bn_var[b],
                            eps,
                        )?
                    };
                    b += 1;
                }
                LayerSpec::Relu => cur = tape.relu(cur),
                LayerSpec::Sigmoid => cur = tape.sigmoid(cur),
                LayerSpec::MaxPool => cur = tape.max_pool2x2(cur)?,
                LayerSpec::GlobalAvgPool => cur = tape.global_avg_pool(cur)?,
                LayerSpec::Upsample => cur = tape.upsample_nearest2x(cur)?,
                LayerSpec::Flatten => cur = tape.flatten(cur)?,
                LayerSpec::Dense { .. } => {
                    let w = take(tape, &self.tensors, &mut p, &mut param_ids);
                    let bias = take(tape, &self.tensors, &mut p, &mut param_ids);
                    cur = tape.dense(cur, w, bias)?;
                }
                LayerSpec::Softmax => cur = tape.softmax(cur)?,
                LayerSpec::ResBlock { filters, stride } => {
                    let (_, in_c, _, _) = tape.value(cur).dims4()?;
                    let skip_src = cur;
                    let w1 = take(tape, &self.tensors, &mut p, &mut param_ids);
                    let b1 = take(tape, &self.tensors, &mut p, &mut param_ids);
                    let g1 = take(tape, &self.tensors, &mut p, &mut param_ids);
                    let be1 = take(tape, &self.tensors, &mut p, &mut param_ids);
                    let w2 = take(tape, &self.tensors, &mut p, &mut param_ids);
                    let b2 = take(tape, &self.tensors, &mut p, &mut param_ids);
                    let g2 = take(tape, &self.tensors, &mut p, &mut param_ids);
                    let be2 = take(tape, &self.tensors, &mut p, &mut param_ids);

                    let mut y = tape.conv2d(skip_src, w1, b1, stride, Padding::Same)?;
                    y = self.bn_at(tape, y, g1, be1, b, trainable, momentum, eps)?;
                    y = tape.relu(y);
                    y = tape.conv2d(y, w2, b2, 1, Padding::Same)?;
                    y = self.bn_at(tape, y, g2, be2, b + 1, trainable, momentum, eps)?;

                    let skip = if in_c != filters || stride != 1 {
                        let pw = take(tape, &self.tensors, &mut p, &mut param_ids);
                        let pb = take(tape, &self.tensors, &mut p, &mut param_ids);
                        let pg = take(tape, &self.tensors, &mut p, &mut param_ids);
                        let pbe = take(tape, &self.tensors, &mut p, &mut param_ids);
                        let s = tape.conv2d(skip_src, pw, pb, stride, Padding::Same)?;
                        let s = self.bn_at(tape, s, pg, pbe, b + 2, trainable, momentum, eps)?;
                        b += 3;
                        s
                    } else {
                        b += 2;
                        skip_src
                    };
                    y = tape.add(y, skip)?;
                    cur = tape.relu(y);
                }
            }
        }
        debug_assert_eq!(p, self.param_offsets[range.end]);
        debug_assert_eq!(b, self.bn_offsets[range.end]);
        Ok(Forward {
            output: cur,
            param_ids,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_at(
        &mut self,
        tape: &mut Tape<E>,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        idx: usize,
        trainable: bool,
        momentum: E,
        eps: E,
    ) -> Result<TensorId> {
        if trainable {
            tape.batchnorm_train(
                x,
                gamma,
                beta,
                &mut self.bn_mean[idx],
                &mut self.bn_var[idx],
                momentum,
                eps,
            )
        } else {
            tape.batchnorm_eval(x, gamma, beta, &self.bn_mean[idx], &self.bn_var[idx], eps)
        }
    }

    /// Inference over a batch: full forward in eval mode, no recording.
    pub fn infer(&mut self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let fwd = self.forward(&mut tape, xid, Mode::Eval, 0)?;
        Ok(tape.value(fwd.output).clone())
    }
}

fn kaiming_uniform<E: Element>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        E::from_f64(uniform_range(rng, -bound, bound))
    })
}
