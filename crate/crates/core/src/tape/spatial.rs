//! Convolution, pooling, and upsampling ops.

use super::linalg::{col2im_acc, im2col, matmul_acc, matmul_transa_acc, matmul_transb_acc};
use super::{Padding, Step, Tape, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Element;
use crate::tensor::Tensor;

pub(crate) struct ConvGeometry {
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output size and implicit zero padding for one conv application.
pub(crate) fn conv_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    match padding {
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
            Ok(ConvGeometry {
                oh,
                ow,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            })
        }
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::Dimension(format!(
                    "valid conv kernel {kh}x{kw} does not fit input {h}x{w}"
                )));
            }
            Ok(ConvGeometry {
                oh: (h - kh) / stride + 1,
                ow: (w - kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
    }
}

impl<E: Element> Tape<E> {
    /// 2-d convolution of `x: [N,C,H,W]` with `w: [F,C,kh,kw]` and bias
    /// `b: [F]`. Stride 1 or 2, zero padding per `padding`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: Padding,
    ) -> Result<TensorId> {
        if stride != 1 && stride != 2 {
            return Err(Error::Dimension(format!(
                "conv stride must be 1 or 2, got {stride}"
            )));
        }
        let (n, c, h, win) = self.values[x.0].dims4()?;
        let (f, wc, kh, kw) = self.values[w.0].dims4()?;
        if wc != c {
            return Err(Error::Dimension(format!(
                "conv weight expects {wc} input channels, input has {c}"
            )));
        }
        if self.values[b.0].shape() != [f] {
            return Err(Error::Dimension(format!(
                "conv bias shape {:?} does not match {f} filters",
                self.values[b.0].shape()
            )));
        }
        let geom = conv_geometry(h, win, kh, kw, stride, padding)?;
        let (oh, ow) = (geom.oh, geom.ow);
        let spatial = oh * ow;
        let k = c * kh * kw;

        let mut out = vec![E::ZERO; n * f * spatial];
        let mut cols = vec![E::ZERO; k * spatial];
        let xv = self.values[x.0].data();
        let wv = self.values[w.0].data();
        let bv = self.values[b.0].data();
        for img in 0..n {
            im2col(
                &xv[img * c * h * win..(img + 1) * c * h * win],
                c,
                h,
                win,
                kh,
                kw,
                stride,
                geom.pad_top,
                geom.pad_left,
                oh,
                ow,
                &mut cols,
            );
            let dst = &mut out[img * f * spatial..(img + 1) * f * spatial];
            matmul_acc(wv, &cols, dst, f, k, spatial);
            for filt in 0..f {
                let bias = bv[filt];
                for v in &mut dst[filt * spatial..(filt + 1) * spatial] {
                    *v += bias;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, f, oh, ow], out);
        let (out_id, needs) = self.push_output(value, &[x, w, b]);
        if needs {
            self.record(Step::Conv2d {
                x,
                w,
                b,
                out: out_id,
                stride,
                padding,
            });
        }
        Ok(out_id)
    }

    pub(crate) fn conv2d_backward(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        out: TensorId,
        stride: usize,
        padding: Padding,
    ) {
        let Some(g) = self.grads[out.0].take() else {
            return;
        };
        let (n, c, h, win) = self.values[x.0].dims4().unwrap();
        let (f, _, kh, kw) = self.values[w.0].dims4().unwrap();
        let geom = conv_geometry(h, win, kh, kw, stride, padding).unwrap();
        let (oh, ow) = (geom.oh, geom.ow);
        let spatial = oh * ow;
        let k = c * kh * kw;

        let need_x = self.needs_grad[x.0];
        let need_w = self.needs_grad[w.0];
        let need_b = self.needs_grad[b.0];

        let mut db = vec![E::ZERO; f];
        let mut dw = vec![E::ZERO; f * k];
        let mut dx = vec![E::ZERO; if need_x { n * c * h * win } else { 0 }];
        let mut cols = vec![E::ZERO; k * spatial];
        let mut dcols = vec![E::ZERO; k * spatial];

        let xv = self.values[x.0].data();
        let wv = self.values[w.0].data();
        for img in 0..n {
            let gimg = &g.data()[img * f * spatial..(img + 1) * f * spatial];
            if need_b {
                for filt in 0..f {
                    let mut acc = E::ZERO;
                    for &gv in &gimg[filt * spatial..(filt + 1) * spatial] {
                        acc += gv;
                    }
                    db[filt] += acc;
                }
            }
            if need_w {
                im2col(
                    &xv[img * c * h * win..(img + 1) * c * h * win],
                    c,
                    h,
                    win,
                    kh,
                    kw,
                    stride,
                    geom.pad_top,
                    geom.pad_left,
                    oh,
                    ow,
                    &mut cols,
                );
                matmul_transb_acc(gimg, &cols, &mut dw, f, spatial, k);
            }
            if need_x {
                dcols.iter_mut().for_each(|v| *v = E::ZERO);
                matmul_transa_acc(wv, gimg, &mut dcols, f, k, spatial);
                col2im_acc(
                    &dcols,
                    c,
                    h,
                    win,
                    kh,
                    kw,
                    stride,
                    geom.pad_top,
                    geom.pad_left,
                    oh,
                    ow,
                    &mut dx[img * c * h * win..(img + 1) * c * h * win],
                );
            }
        }
        if need_b {
            self.accumulate(b, Tensor::from_parts(vec![f], db));
        }
        if need_w {
            let wshape = self.values[w.0].shape().to_vec();
            self.accumulate(w, Tensor::from_parts(wshape, dw));
        }
        if need_x {
            self.accumulate(x, Tensor::from_parts(vec![n, c, h, win], dx));
        }
        self.grads[out.0] = Some(g);
    }

    /// Nearest-neighbour 2x upsampling of `[N,C,H,W]` to `[N,C,2H,2W]`.
    pub fn upsample_nearest2x(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.values[x.0].dims4()?;
        let mut out = vec![E::ZERO; n * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.values[x.0].data();
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..h {
                for xcol in 0..w {
                    let v = src[y * w + xcol];
                    let base = 2 * y * ow + 2 * xcol;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + ow] = v;
                    dst[base + ow + 1] = v;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        let (out_id, needs) = self.push_output(value, &[x]);
        if needs {
            self.record(Step::Upsample2x { x, out: out_id });
        }
        Ok(out_id)
    }

    pub(crate) fn upsample2x_backward(&mut self, x: TensorId, out: TensorId) {
        let Some(g) = self.grads[out.0].take() else {
            return;
        };
        if self.needs_grad[x.0] {
            let (n, c, h, w) = self.values[x.0].dims4().unwrap();
            let (oh, ow) = (2 * h, 2 * w);
            let mut dx = vec![E::ZERO; n * c * h * w];
            for plane in 0..n * c {
                let gsrc = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for y in 0..h {
                    for xcol in 0..w {
                        let base = 2 * y * ow + 2 * xcol;
                        dst[y * w + xcol] =
                            gsrc[base] + gsrc[base + 1] + gsrc[base + ow] + gsrc[base + ow + 1];
                    }
                }
            }
            self.accumulate(x, Tensor::from_parts(vec![n, c, h, w], dx));
        }
        self.grads[out.0] = Some(g);
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even; gradient
    /// routes to the first maximal element of each window.
    pub fn max_pool2x2(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.values[x.0].dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "max pool needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![E::ZERO; n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        let xv = self.values[x.0].data();
        for plane in 0..n * c {
            let src_base = plane * h * w;
            let src = &xv[src_base..src_base + h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_off = 2 * oy * w + 2 * ox;
                    let mut best = src[best_off];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let off = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[off] > best {
                            best = src[off];
                            best_off = off;
                        }
                    }
                    let oi = plane * oh * ow + oy * ow + ox;
                    out[oi] = best;
                    argmax[oi] = (src_base + best_off) as u32;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        let (out_id, needs) = self.push_output(value, &[x]);
        if needs {
            self.record(Step::MaxPool2x2 {
                x,
                out: out_id,
                argmax,
            });
        }
        Ok(out_id)
    }

    pub(crate) fn max_pool2x2_backward(&mut self, x: TensorId, out: TensorId, argmax: &[u32]) {
        let Some(g) = self.grads[out.0].take() else {
            return;
        };
        if self.needs_grad[x.0] {
            let dx = self.grad_slot(x);
            // grad_slot borrows self mutably, so read g's data first.
            for (gi, &src) in g.data().iter().zip(argmax) {
                dx[src as usize] += *gi;
            }
        }
        self.grads[out.0] = Some(g);
    }

    /// Mean over spatial dims: `[N,C,H,W]` to `[N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.values[x.0].dims4()?;
        let area = E::from_usize(h * w);
        let xv = self.values[x.0].data();
        let mut out = vec![E::ZERO; n * c];
        for (plane, slot) in out.iter_mut().enumerate() {
            let mut acc = E::ZERO;
            for &v in &xv[plane * h * w..(plane + 1) * h * w] {
                acc += v;
            }
            *slot = acc / area;
        }
        let value = Tensor::from_parts(vec![n, c, 1, 1], out);
        let (out_id, needs) = self.push_output(value, &[x]);
        if needs {
            self.record(Step::GlobalAvgPool { x, out: out_id });
        }
        Ok(out_id)
    }

    pub(crate) fn global_avg_pool_backward(&mut self, x: TensorId, out: TensorId) {
        let Some(g) = self.grads[out.0].take() else {
            return;
        };
        if self.needs_grad[x.0] {
            let (_, _, h, w) = self.values[x.0].dims4().unwrap();
            let area = E::from_usize(h * w);
            let dx = self.grad_slot(x);
            for (plane, &gv) in g.data().iter().enumerate() {
                let share = gv / area;
                for v in &mut dx[plane * h * w..(plane + 1) * h * w] {
                    *v += share;
                }
            }
        }
        self.grads[out.0] = Some(g);
    }

    /// Affine layer: `x: [N,D] @ w: [D,K] + b: [K]`.
    pub fn dense(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, d) = self.values[x.0].dims2()?;
        let (wd, k) = self.values[w.0].dims2()?;
        if wd != d {
            return Err(Error::Dimension(format!(
                "dense weight expects {wd} inputs, activations have {d}"
            )));
        }
        if self.values[b.0].shape() != [k] {
            return Err(Error::Dimension(format!(
                "dense bias shape {:?} does not match {k} units",
                self.values[b.0].shape()
            )));
        }
        let mut out = vec![E::ZERO; n * k];
        for row in 0..n {
            out[row * k..(row + 1) * k].copy_from_slice(self.values[b.0].data());
        }
        matmul_acc(
            self.values[x.0].data(),
            self.values[w.0].data(),
            &mut out,
            n,
            d,
            k,
        );
        let value = Tensor::from_parts(vec![n, k], out);
        let (out_id, needs) = self.push_output(value, &[x, w, b]);
        if needs {
            self.record(Step::Dense {
                x,
                w,
                b,
                out: out_id,
            });
        }
        Ok(out_id)
    }

    pub(crate) fn dense_backward(&mut self, x: TensorId, w: TensorId, b: TensorId, out: TensorId) {
        let Some(g) = self.grads[out.0].take() else {
            return;
        };
        let (n, d) = self.values[x.0].dims2().unwrap();
        let (_, k) = self.values[w.0].dims2().unwrap();
        if self.needs_grad[b.0] {
            let mut db = vec![E::ZERO; k];
            for row in 0..n {
                for (slot, &gv) in db.iter_mut().zip(&g.data()[row * k..(row + 1) * k]) {
                    *slot += gv;
                }
            }
            self.accumulate(b, Tensor::from_parts(vec![k], db));
        }
        if self.needs_grad[w.0] {
            let mut dw = vec![E::ZERO; d * k];
            matmul_transa_acc(self.values[x.0].data(), g.data(), &mut dw, n, d, k);
            self.accumulate(w, Tensor::from_parts(vec![d, k], dw));
        }
        if self.needs_grad[x.0] {
            let mut dx = vec![E::ZERO; n * d];
            matmul_transb_acc(g.data(), self.values[w.0].data(), &mut dx, n, k, d);
            self.accumulate(x, Tensor::from_parts(vec![n, d], dx));
        }
        self.grads[out.0] = Some(g);
    }
}
