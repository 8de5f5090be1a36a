//! Softmax and the two training losses.

use super::{Step, Tape, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Element;
use crate::tensor::Tensor;

/// Row-wise stable softmax of a `rows x cols` slice.
pub(crate) fn softmax_rows<E: Element>(src: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; rows * cols];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter().skip(1) {
            max = max.maximum(v);
        }
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut denom = E::ZERO;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - max).exp();
            *d = e;
            denom += e;
        }
        for d in dst.iter_mut() {
            *d = *d / denom;
        }
    }
    out
}

impl<E: Element> Tape<E> {
    /// Row-wise softmax of a `[N, C]` tensor.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.values[x.0].dims2()?;
        let out = softmax_rows(self.values[x.0].data(), rows, cols);
        let value = Tensor::from_parts(vec![rows, cols], out);
        let (out_id, needs) = self.push_output(value, &[x]);
        if needs {
            self.record(Step::Softmax { x, out: out_id });
        }
        Ok(out_id)
    }

    /// Mean squared error over all elements, as a scalar.
    pub fn mse(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        if !self.values[pred.0].same_shape(&self.values[target.0]) {
            return Err(Error::Dimension(format!(
                "mse shapes differ: {:?} vs {:?}",
                self.values[pred.0].shape(),
                self.values[target.0].shape()
            )));
        }
        let numel = self.values[pred.0].numel();
        let mut acc = E::ZERO;
        for (&p, &t) in self.values[pred.0]
            .data()
            .iter()
            .zip(self.values[target.0].data())
        {
            let d = p - t;
            acc += d * d;
        }
        let value = Tensor::scalar(acc / E::from_usize(numel));
        let (out_id, needs) = self.push_output(value, &[pred, target]);
        if needs {
            self.record(Step::Mse {
                pred,
                target,
                out: out_id,
            });
        }
        Ok(out_id)
    }

    pub(crate) fn mse_backward(&mut self, pred: TensorId, target: TensorId, out: TensorId) {
        let Some(g) = self.grads[out.0].take() else {
            return;
        };
        let gv = g.data()[0];
        let numel = self.values[pred.0].numel();
        let scale = gv * (E::ONE + E::ONE) / E::from_usize(numel);
        let diffs: Vec<E> = self.values[pred.0]
            .data()
            .iter()
            .zip(self.values[target.0].data())
            .map(|(&p, &t)| scale * (p - t))
            .collect();
        let shape = self.values[pred.0].shape().to_vec();
        if self.needs_grad[pred.0] {
            self.accumulate(pred, Tensor::from_parts(shape.clone(), diffs.clone()));
        }
        if self.needs_grad[target.0] {
            let neg: Vec<E> = diffs.iter().map(|&d| -d).collect();
            self.accumulate(target, Tensor::from_parts(shape, neg));
        }
        self.grads[out.0] = Some(g);
    }

    /// Mean cross-entropy between `logits: [N, C]` and integer class targets.
    /// Computed as `logsumexp(row) - row[target]` per example, so no explicit
    /// softmax is materialized on the forward value path.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (rows, cols) = self.values[logits.0].dims2()?;
        if targets.is_empty() {
            return Err(Error::Dimension("cross entropy needs a nonempty batch".into()));
        }
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Dimension(format!(
                "class index {bad} out of range for {cols} classes"
            )));
        }
        let src = self.values[logits.0].data();
        let mut acc = E::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * cols..(r + 1) * cols];
            let mut max = row[0];
            for &v in row.iter().skip(1) {
                max = max.maximum(v);
            }
            let mut denom = E::ZERO;
            for &v in row {
                denom += (v - max).exp();
            }
            acc += max + denom.ln() - row[t];
        }
        let value = Tensor::scalar(acc / E::from_usize(rows));
        let probs = softmax_rows(src, rows, cols);
        let (out_id, needs) = self.push_output(value, &[logits]);
        if needs {
            self.record(Step::CrossEntropyLogits {
                logits,
                out: out_id,
                probs,
                targets: targets.to_vec(),
            });
        }
        Ok(out_id)
    }

    pub(crate) fn cross_entropy_backward(
        &mut self,
        logits: TensorId,
        out: TensorId,
        probs: &[E],
        targets: &[usize],
    ) {
        let Some(g) = self.grads[out.0].take() else {
            return;
        };
        if self.needs_grad[logits.0] {
            let (rows, cols) = self.values[logits.0].dims2().unwrap();
            let scale = g.data()[0] / E::from_usize(rows);
            let mut dl = probs.to_vec();
            for (r, &t) in targets.iter().enumerate() {
                dl[r * cols + t] -= E::ONE;
            }
            for v in dl.iter_mut() {
                *v *= scale;
            }
            self.accumulate(logits, Tensor::from_parts(vec![rows, cols], dl));
        }
        self.grads[out.0] = Some(g);
    }
}
