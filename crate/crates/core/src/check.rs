//! Finite-difference gradient verification.
//!
//! Every differentiable op is exercised at f64 precision against central
//! differences. Inputs are sampled away from relu and max-pool kinks so the
//! numeric derivative is well defined at the probe points.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seed_rng, shuffle, uniform_range};
use crate::tape::{Padding, Tape, TensorId};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Acceptance threshold on the relative error.
pub const GRAD_TOL: f64 = 1e-5;
/// Minimum distance kept between sampled inputs and piecewise kinks.
pub const KINK_MARGIN: f64 = 0.05;

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Worst relative error between analytic gradients and central differences
/// over every coordinate of every input.
///
/// `build` must assemble the same scalar-valued graph each time it is called;
/// it runs once for the analytic pass and twice per perturbed coordinate.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Dimension(
            "gradcheck needs a scalar-valued graph".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut probe = |v: f64| -> Result<f64> {
                let mut t2 = Tape::new();
                let ids2: Vec<TensorId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] = v;
                        }
                        t2.constant(t)
                    })
                    .collect();
                let l = build(&mut t2, &ids2)?;
                Ok(t2.value(l).data()[0])
            };
            let x0 = input.data()[j];
            let numeric = (probe(x0 + FD_STEP)? - probe(x0 - FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// One op's verification outcome.
#[derive(Debug, Clone)]
pub struct OpGradReport {
    pub op: &'static str,
    pub max_rel_err: f64,
}

impl OpGradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

fn smooth_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seed_rng(seed);
    Tensor::from_fn(shape, |_| uniform_range(&mut rng, -1.0, 1.0))
}

/// Uniform away from zero: `|v|` lands in `[margin + 0.05, 1.0]`.
fn kink_free_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seed_rng(seed);
    Tensor::from_fn(shape, |_| {
        let mag = uniform_range(&mut rng, KINK_MARGIN + 0.05, 1.0);
        if uniform_range(&mut rng, 0.0, 1.0) < 0.5 {
            -mag
        } else {
            mag
        }
    })
}

/// Each 2x2 window gets four well-separated levels in random order, so the
/// pool argmax is stable under the probe step.
fn pool_safe_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = seed_rng(seed);
    let mut data = vec![0.0f64; n * c * h * w];
    for plane in 0..n * c {
        for wy in 0..h / 2 {
            for wx in 0..w / 2 {
                let mut levels = [0.0f64, 0.25, 0.5, 0.75];
                shuffle(&mut rng, &mut levels);
                for (slot, (dy, dx)) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)]
                    .into_iter()
                    .enumerate()
                {
                    let off = plane * h * w + (2 * wy + dy) * w + 2 * wx + dx;
                    data[off] = levels[slot] + uniform_range(&mut rng, 0.0, 0.02);
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], data).unwrap()
}

/// Runs the full per-op gradient check suite and reports the worst relative
/// error seen for each op.
pub fn op_gradient_reports(seed: u64) -> Result<Vec<OpGradReport>> {
    let mut reports = Vec::new();
    let mut push = |op: &'static str, err: Result<f64>| -> Result<()> {
        reports.push(OpGradReport {
            op,
            max_rel_err: err?,
        });
        Ok(())
    };

    let s = |tag: &str| derive_seed(seed, tag);

    push(
        "conv2d_same_s1",
        gradcheck(
            &[
                smooth_tensor(&[2, 2, 4, 4], s("c1x")),
                smooth_tensor(&[3, 2, 3, 3], s("c1w")),
                smooth_tensor(&[3], s("c1b")),
            ],
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 1, Padding::Same)?;
                Ok(t.sum(y))
            },
        ),
    )?;
    push(
        "conv2d_same_s2",
        gradcheck(
            &[
                smooth_tensor(&[1, 2, 4, 4], s("c2x")),
                smooth_tensor(&[3, 2, 3, 3], s("c2w")),
                smooth_tensor(&[3], s("c2b")),
            ],
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 2, Padding::Same)?;
                Ok(t.sum(y))
            },
        ),
    )?;
    push(
        "conv2d_valid_s1",
        gradcheck(
            &[
                smooth_tensor(&[1, 2, 5, 5], s("c3x")),
                smooth_tensor(&[2, 2, 3, 3], s("c3w")),
                smooth_tensor(&[2], s("c3b")),
            ],
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 1, Padding::Valid)?;
                Ok(t.sum(y))
            },
        ),
    )?;
    push(
        "upsample_nearest2x",
        gradcheck(&[smooth_tensor(&[1, 2, 3, 3], s("up"))], |t, ids| {
            let y = t.upsample_nearest2x(ids[0])?;
            let q = t.sigmoid(y);
            Ok(t.sum(q))
        }),
    )?;
    push(
        "relu",
        gradcheck(&[kink_free_tensor(&[2, 6], s("relu"))], |t, ids| {
            let y = t.relu(ids[0]);
            let z = t.add(y, ids[0])?;
            let q = t.sigmoid(z);
            Ok(t.sum(q))
        }),
    )?;
    push(
        "sigmoid",
        gradcheck(&[smooth_tensor(&[2, 5], s("sig"))], |t, ids| {
            let y = t.sigmoid(ids[0]);
            Ok(t.sum(y))
        }),
    )?;
    push(
        "batchnorm_train",
        gradcheck(
            &[
                smooth_tensor(&[3, 2, 2, 2], s("bntx")),
                smooth_tensor(&[2], s("bntg")),
                smooth_tensor(&[2], s("bntb")),
            ],
            |t, ids| {
                let mut rm = vec![0.0f64; 2];
                let mut rv = vec![1.0f64; 2];
                let y = t.batchnorm_train(ids[0], ids[1], ids[2], &mut rm, &mut rv, 0.1, 1e-5)?;
                let q = t.sigmoid(y);
                Ok(t.sum(q))
            },
        ),
    )?;
    push(
        "batchnorm_eval",
        gradcheck(
            &[
                smooth_tensor(&[2, 2, 2, 2], s("bnex")),
                smooth_tensor(&[2], s("bneg")),
                smooth_tensor(&[2], s("bneb")),
            ],
            |t, ids| {
                let rm = vec![0.1f64, -0.2];
                let rv = vec![0.9f64, 1.3];
                let y = t.batchnorm_eval(ids[0], ids[1], ids[2], &rm, &rv, 1e-5)?;
                let q = t.sigmoid(y);
                Ok(t.sum(q))
            },
        ),
    )?;
    push(
        "max_pool2x2",
        gradcheck(&[pool_safe_tensor(1, 2, 4, 4, s("pool"))], |t, ids| {
            let y = t.max_pool2x2(ids[0])?;
            let q = t.sigmoid(y);
            Ok(t.sum(q))
        }),
    )?;
    push(
        "global_avg_pool",
        gradcheck(&[smooth_tensor(&[2, 3, 2, 2], s("gap"))], |t, ids| {
            let y = t.global_avg_pool(ids[0])?;
            let q = t.sigmoid(y);
            Ok(t.sum(q))
        }),
    )?;
    push(
        "flatten_dense",
        gradcheck(
            &[
                smooth_tensor(&[2, 2, 2, 2], s("fdx")),
                smooth_tensor(&[8, 3], s("fdw")),
                smooth_tensor(&[3], s("fdb")),
            ],
            |t, ids| {
                let f = t.flatten(ids[0])?;
                let y = t.dense(f, ids[1], ids[2])?;
                let q = t.sigmoid(y);
                Ok(t.sum(q))
            },
        ),
    )?;
    push(
        "add",
        gradcheck(
            &[smooth_tensor(&[2, 4], s("adda")), smooth_tensor(&[2, 4], s("addb"))],
            |t, ids| {
                let y = t.add(ids[0], ids[1])?;
                let q = t.sigmoid(y);
                Ok(t.sum(q))
            },
        ),
    )?;
    push(
        "softmax",
        gradcheck(&[smooth_tensor(&[2, 5], s("smx"))], |t, ids| {
            let y = t.softmax(ids[0])?;
            let q = t.sigmoid(y);
            Ok(t.sum(q))
        }),
    )?;
    push(
        "mse",
        gradcheck(
            &[smooth_tensor(&[2, 6], s("msep")), smooth_tensor(&[2, 6], s("mset"))],
            |t, ids| t.mse(ids[0], ids[1]),
        ),
    )?;
    push(
        "softmax_cross_entropy",
        gradcheck(&[smooth_tensor(&[3, 5], s("ce"))], |t, ids| {
            t.softmax_cross_entropy(ids[0], &[0, 2, 4])
        }),
    )?;

    Ok(reports)
}
