//! Batch normalization in training and inference modes.
//!
//! Running statistics live outside the tape (the caller owns them as plain
//! buffers) so that a frozen layer can be replayed bit-identically.

use super::{Step, Tape, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Element;
use crate::tensor::Tensor;

impl<E: Element> Tape<E> {
    /// Normalizes with batch statistics and folds them into the running
    /// buffers: `r = (1 - momentum) * r + momentum * stat`. The running
    /// variance uses the unbiased estimate.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &mut [E],
        running_var: &mut [E],
        momentum: E,
        eps: E,
    ) -> Result<TensorId> {
        let (n, c, h, w) = self.values[x.0].dims4()?;
        self.check_affine_shapes(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension(format!(
                "running stats hold {} channels, input has {c}",
                running_mean.len()
            )));
        }
        let m = n * h * w;
        if m < 2 {
            return Err(Error::Numeric(
                "batchnorm in training mode needs at least 2 values per channel".into(),
            ));
        }
        let m_e = E::from_usize(m);
        let plane = h * w;
        let xv = self.values[x.0].data();

        let mut mean = vec![E::ZERO; c];
        let mut inv_std = vec![E::ZERO; c];
        let mut out = vec![E::ZERO; n * c * plane];
        let gv = self.values[gamma.0].data();
        let bv = self.values[beta.0].data();
        for ch in 0..c {
            let mut acc = E::ZERO;
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for &v in &xv[base..base + plane] {
                    acc += v;
                }
            }
            let mu = acc / m_e;
            let mut var_acc = E::ZERO;
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for &v in &xv[base..base + plane] {
                    let d = v - mu;
                    var_acc += d * d;
                }
            }
            let var = var_acc / m_e;
            let istd = E::ONE / (var + eps).sqrt();
            mean[ch] = mu;
            inv_std[ch] = istd;

            let scale = gv[ch] * istd;
            let shift = bv[ch] - mu * scale;
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for (o, &v) in out[base..base + plane].iter_mut().zip(&xv[base..base + plane]) {
                    *o = v * scale + shift;
                }
            }

            let unbiased = var * m_e / E::from_usize(m - 1);
            running_mean[ch] = (E::ONE - momentum) * running_mean[ch] + momentum * mu;
            running_var[ch] = (E::ONE - momentum) * running_var[ch] + momentum * unbiased;
        }

        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let (out_id, needs) = self.push_output(value, &[x, gamma, beta]);
        if needs {
            self.record(Step::BatchNormTrain {
                x,
                gamma,
                beta,
                out: out_id,
                mean,
                inv_std,
            });
        }
        Ok(out_id)
    }

    /// Normalizes with the frozen running statistics. Still differentiable:
    /// the stats are constants, the affine parameters are not.
    pub fn batchnorm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[E],
        running_var: &[E],
        eps: E,
    ) -> Result<TensorId> {
        let (n, c, h, w) = self.values[x.0].dims4()?;
        self.check_affine_shapes(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension(format!(
                "running stats hold {} channels, input has {c}",
                running_mean.len()
            )));
        }
        let plane = h * w;
        let xv = self.values[x.0].data();
        let gv = self.values[gamma.0].data();
        let bv = self.values[beta.0].data();

        let mean: Vec<E> = running_mean.to_vec();
        let inv_std: Vec<E> = running_var
            .iter()
            .map(|&v| E::ONE / (v + eps).sqrt())
            .collect();

        let mut out = vec![E::ZERO; n * c * plane];
        for ch in 0..c {
            let scale = gv[ch] * inv_std[ch];
            let shift = bv[ch] - mean[ch] * scale;
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for (o, &v) in out[base..base + plane].iter_mut().zip(&xv[base..base + plane]) {
                    *o = v * scale + shift;
                }
            }
        }

        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let (out_id, needs) = self.push_output(value, &[x, gamma, beta]);
        if needs {
            self.record(Step::BatchNormEval {
                x,
                gamma,
                beta,
                out: out_id,
                mean,
                inv_std,
            });
        }
        Ok(out_id)
    }

    fn check_affine_shapes(&self, gamma: TensorId, beta: TensorId, c: usize) -> Result<()> {
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.values[id.0].shape() != [c] {
                return Err(Error::Dimension(format!(
                    "batchnorm {name} shape {:?} does not match {c} channels",
                    self.values[id.0].shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn batchnorm_train_backward(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        out: TensorId,
        mean: &[E],
        inv_std: &[E],
    ) {
        let Some(g) = self.grads[out.0].take() else {
            return;
        };
        let (n, c, h, w) = self.values[x.0].dims4().unwrap();
        let plane = h * w;
        let m_e = E::from_usize(n * plane);
        let xv = self.values[x.0].data();
        let gammav = self.values[gamma.0].data();

        let mut dgamma = vec![E::ZERO; c];
        let mut dbeta = vec![E::ZERO; c];
        let mut dx = vec![E::ZERO; n * c * plane];
        for ch in 0..c {
            let mu = mean[ch];
            let istd = inv_std[ch];
            let mut sum_g = E::ZERO;
            let mut sum_gx = E::ZERO;
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for (&gi, &xi) in g.data()[base..base + plane].iter().zip(&xv[base..base + plane]) {
                    sum_g += gi;
                    sum_gx += gi * (xi - mu) * istd;
                }
            }
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;

            // dx = gamma * istd / m * (m*g - sum_g - xhat * sum_gxhat)
            let coeff = gammav[ch] * istd / m_e;
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for ((di, &gi), &xi) in dx[base..base + plane]
                    .iter_mut()
                    .zip(&g.data()[base..base + plane])
                    .zip(&xv[base..base + plane])
                {
                    let xhat = (xi - mu) * istd;
                    *di = coeff * (m_e * gi - sum_g - xhat * sum_gx);
                }
            }
        }
        if self.needs_grad[gamma.0] {
            self.accumulate(gamma, Tensor::from_parts(vec![c], dgamma));
        }
        if self.needs_grad[beta.0] {
            self.accumulate(beta, Tensor::from_parts(vec![c], dbeta));
        }
        if self.needs_grad[x.0] {
            self.accumulate(x, Tensor::from_parts(vec![n, c, h, w], dx));
        }
        self.grads[out.0] = Some(g);
    }

    pub(crate) fn batchnorm_eval_backward(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        out: TensorId,
        mean: &[E],
        inv_std: &[E],
    ) {
        let Some(g) = self.grads[out.0].take() else {
            return;
        };
        let (n, c, h, w) = self.values[x.0].dims4().unwrap();
        let plane = h * w;
        let gammav: Vec<E> = self.values[gamma.0].data().to_vec();

        if self.needs_grad[gamma.0] || self.needs_grad[beta.0] {
            let mut dgamma = vec![E::ZERO; c];
            let mut dbeta = vec![E::ZERO; c];
            let xv = self.values[x.0].data();
            for ch in 0..c {
                let mu = mean[ch];
                let istd = inv_std[ch];
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for (&gi, &xi) in
                        g.data()[base..base + plane].iter().zip(&xv[base..base + plane])
                    {
                        dgamma[ch] += gi * (xi - mu) * istd;
                        dbeta[ch] += gi;
                    }
                }
            }
            if self.needs_grad[gamma.0] {
                self.accumulate(gamma, Tensor::from_parts(vec![c], dgamma));
            }
            if self.needs_grad[beta.0] {
                self.accumulate(beta, Tensor::from_parts(vec![c], dbeta));
            }
        }
        if self.needs_grad[x.0] {
            let mut dx = vec![E::ZERO; n * c * plane];
            for ch in 0..c {
                let scale = gammav[ch] * inv_std[ch];
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for (di, &gi) in dx[base..base + plane]
                        .iter_mut()
                        .zip(&g.data()[base..base + plane])
                    {
                        *di = gi * scale;
                    }
                }
            }
            self.accumulate(x, Tensor::from_parts(vec![n, c, h, w], dx));
        }
        self.grads[out.0] = Some(g);
    }
}
