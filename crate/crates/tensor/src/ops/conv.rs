//! Convolution, transposed convolution and max pooling on NCHW tensors.
//!
//! Convolutions unfold the whole batch with `im2col` into one
//! `(C*k*k) x (B*L)` column matrix and multiply it per group; depthwise
//! convolutions (one input and one output channel per group) run direct.

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Node, Op, Var};
use crate::kernels::{
    batch_to_channel_major, channel_to_batch_major, col2im, depthwise_conv, depthwise_conv_grad_input,
    depthwise_conv_grad_weight, for_each_chunk, gemm, im2col, Mat, Window,
};
use crate::tensor::Tensor;

use super::{val, Grads};

fn add_channel_bias<F: Float>(out: &mut [F], bias: &[F], len: usize) {
    let ch = bias.len();
    for_each_chunk(out, len, move |bc, plane| {
        let b = bias[bc % ch];
        plane.iter_mut().for_each(|v| *v += b);
    });
}

fn channel_bias_grad<F: Float>(g: &[F], batch: usize, ch: usize, len: usize) -> Vec<F> {
    let mut gb = vec![F::zero(); ch];
    for b in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            let plane = &g[(b * ch + c) * len..(b * ch + c + 1) * len];
            *acc += plane.iter().copied().sum::<F>();
        }
    }
    gb
}

struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    win: Window,
}

impl ConvDims {
    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin
    }
}

fn conv_dims(x: &[usize], w: &[usize], stride: usize, padding: usize, groups: usize) -> Result<ConvDims> {
    if x.len() != 4 || w.len() != 4 || w[2] != w[3] || groups == 0 {
        return Err(TensorError::mismatch("conv2d", x, w));
    }
    let (batch, cin, h, wd) = (x[0], x[1], x[2], x[3]);
    let cout = w[0];
    if cin % groups != 0 || cout % groups != 0 || w[1] * groups != cin {
        return Err(TensorError::mismatch("conv2d", x, w));
    }
    let win = Window::new(h, wd, w[2], stride, padding).ok_or(TensorError::EmptyOutput {
        op: "conv2d",
        input: x.to_vec(),
    })?;
    Ok(ConvDims {
        batch,
        cin,
        cout,
        groups,
        win,
    })
}

fn check_bias<F: Float>(g: &Graph<F>, b: Option<Var>, ch: usize, op: &'static str) -> Result<()> {
    if let Some(b) = b {
        let s = g.value(b).shape();
        if s != [ch] {
            return Err(TensorError::mismatch(op, s, &[ch]));
        }
    }
    Ok(())
}

impl<F: Float> Graph<F> {
    /// 2-D cross-correlation. `w` is `out x in/groups x k x k`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let d = conv_dims(tx.shape(), tw.shape(), stride, padding, groups)?;
        check_bias(self, b, d.cout, "conv2d bias")?;
        if d.depthwise() {
            let mut out = depthwise_conv(tx.data(), tw.data(), d.batch, d.cin, &d.win);
            if let Some(b) = b {
                add_channel_bias(&mut out, self.value(b).data(), d.win.out_len());
            }
            let value = Tensor::from_vec(&[d.batch, d.cout, d.win.oh, d.win.ow], out)?;
            let op = Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            };
            return Ok(self.push(value, op));
        }
        let k2 = d.win.kernel * d.win.kernel;
        let l = d.win.out_len();
        let ld = d.batch * l;
        let (cg, og) = (d.cin / groups, d.cout / groups);
        let cols = im2col(tx.data(), d.batch, d.cin, &d.win);
        let mut tmp = vec![F::zero(); d.cout * ld];
        for gi in 0..groups {
            let wg = &tw.data()[gi * og * cg * k2..(gi + 1) * og * cg * k2];
            let cgm = &cols[gi * cg * k2 * ld..(gi + 1) * cg * k2 * ld];
            gemm(
                F::one(),
                Mat::row_major(wg, og, cg * k2),
                Mat::row_major(cgm, cg * k2, ld),
                F::zero(),
                &mut tmp[gi * og * ld..(gi + 1) * og * ld],
            );
        }
        let mut out = channel_to_batch_major(&tmp, d.batch, d.cout, l);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), l);
        }
        let value = Tensor::from_vec(&[d.batch, d.cout, d.win.oh, d.win.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            },
        ))
    }

    /// Transposed convolution without padding. `w` is `in x out x k x k`;
    /// the output side is `(h - 1) * stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[0] || stride == 0 {
            return Err(TensorError::mismatch("conv_transpose2d", xs, ws));
        }
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        check_bias(self, b, cout, "conv_transpose2d bias")?;
        if h == 0 || wd == 0 || k == 0 {
            return Err(TensorError::EmptyOutput {
                op: "conv_transpose2d",
                input: xs.to_vec(),
            });
        }
        let (oh, ow) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        let win = Window::new(oh, ow, k, stride, 0).expect("output covers kernel");
        debug_assert_eq!((win.oh, win.ow), (h, wd));
        let hw = h * wd;
        let xt = batch_to_channel_major(tx.data(), batch, cin, hw);
        let mut cols = vec![F::zero(); cout * k * k * batch * hw];
        gemm(
            F::one(),
            Mat::row_major(tw.data(), cin, cout * k * k).t(),
            Mat::row_major(&xt, cin, batch * hw),
            F::zero(),
            &mut cols,
        );
        let mut out = col2im(&cols, batch, cout, &win);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), oh * ow);
        }
        let value = Tensor::from_vec(&[batch, cout, oh, ow], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, stride }))
    }

    /// Max pooling without padding. Ties go to the first maximal element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        let degenerate = || TensorError::DegenerateWindow {
            op: "maxpool2d",
            kernel,
            stride,
            input: s.to_vec(),
        };
        if s.len() != 4 {
            return Err(degenerate());
        }
        let win = Window::new(s[2], s[3], kernel, stride, 0).ok_or_else(degenerate)?;
        let planes = s[0] * s[1];
        let (h, w) = (s[2], s[3]);
        let l = win.out_len();
        let src = tx.data();
        let mut out = vec![F::zero(); planes * l];
        let mut argmax = vec![0usize; planes * l];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..win.oh {
                for ox in 0..win.ow {
                    let mut best = (oy * stride) * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = (oy * stride + ky) * w + ox * stride + kx;
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                    }
                    out[p * l + oy * win.ow + ox] = plane[best];
                    argmax[p * l + oy * win.ow + ox] = p * h * w + best;
                }
            }
        }
        let value = Tensor::from_vec(&[s[0], s[1], win.oh, win.ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }
}

pub(crate) fn backward<F: Float>(nodes: &[Node<F>], i: usize, g: &Tensor<F>) -> Result<Grads<F>> {
    let mut grads = Vec::with_capacity(3);
    match &nodes[i].op {
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
            groups,
        } => {
            let (tx, tw) = (val(nodes, *x), val(nodes, *w));
            let d = conv_dims(tx.shape(), tw.shape(), *stride, *padding, *groups)?;
            let k2 = d.win.kernel * d.win.kernel;
            let l = d.win.out_len();
            if d.depthwise() {
                if nodes[w.0].requires_grad {
                    let gw = depthwise_conv_grad_weight(g.data(), tx.data(), d.batch, d.cin, &d.win);
                    grads.push((*w, Tensor::from_vec(tw.shape(), gw)?));
                }
                if nodes[x.0].requires_grad {
                    let gx = depthwise_conv_grad_input(g.data(), tw.data(), d.batch, d.cin, &d.win);
                    grads.push((*x, Tensor::from_vec(tx.shape(), gx)?));
                }
                if let Some(b) = b {
                    let gb = channel_bias_grad(g.data(), d.batch, d.cout, l);
                    grads.push((*b, Tensor::from_vec(&[d.cout], gb)?));
                }
                return Ok(grads);
            }
            let ld = d.batch * l;
            let (cg, og) = (d.cin / d.groups, d.cout / d.groups);
            let gt = batch_to_channel_major(g.data(), d.batch, d.cout, l);
            if nodes[w.0].requires_grad {
                let cols = im2col(tx.data(), d.batch, d.cin, &d.win);
                let mut gw = vec![F::zero(); tw.numel()];
                for gi in 0..d.groups {
                    gemm(
                        F::one(),
                        Mat::row_major(&gt[gi * og * ld..(gi + 1) * og * ld], og, ld),
                        Mat::row_major(&cols[gi * cg * k2 * ld..(gi + 1) * cg * k2 * ld], cg * k2, ld).t(),
                        F::zero(),
                        &mut gw[gi * og * cg * k2..(gi + 1) * og * cg * k2],
                    );
                }
                grads.push((*w, Tensor::from_vec(tw.shape(), gw)?));
            }
            if nodes[x.0].requires_grad {
                let mut dcols = vec![F::zero(); d.cin * k2 * ld];
                for gi in 0..d.groups {
                    gemm(
                        F::one(),
                        Mat::row_major(&tw.data()[gi * og * cg * k2..(gi + 1) * og * cg * k2], og, cg * k2).t(),
                        Mat::row_major(&gt[gi * og * ld..(gi + 1) * og * ld], og, ld),
                        F::zero(),
                        &mut dcols[gi * cg * k2 * ld..(gi + 1) * cg * k2 * ld],
                    );
                }
                let gx = col2im(&dcols, d.batch, d.cin, &d.win);
                grads.push((*x, Tensor::from_vec(tx.shape(), gx)?));
            }
            if let Some(b) = b {
                let gb = channel_bias_grad(g.data(), d.batch, d.cout, l);
                grads.push((*b, Tensor::from_vec(&[d.cout], gb)?));
            }
        }
        Op::ConvTranspose2d { x, w, b, stride } => {
            let (tx, tw) = (val(nodes, *x), val(nodes, *w));
            let (batch, cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
            let (cout, k) = (tw.shape()[1], tw.shape()[2]);
            let (oh, ow) = (g.shape()[2], g.shape()[3]);
            let win = Window::new(oh, ow, k, *stride, 0).expect("valid forward geometry");
            let hw = h * wd;
            let dcols = im2col(g.data(), batch, cout, &win);
            if nodes[x.0].requires_grad {
                let mut gxt = vec![F::zero(); cin * batch * hw];
                gemm(
                    F::one(),
                    Mat::row_major(tw.data(), cin, cout * k * k),
                    Mat::row_major(&dcols, cout * k * k, batch * hw),
                    F::zero(),
                    &mut gxt,
                );
                let gx = channel_to_batch_major(&gxt, batch, cin, hw);
                grads.push((*x, Tensor::from_vec(tx.shape(), gx)?));
            }
            if nodes[w.0].requires_grad {
                let xt = batch_to_channel_major(tx.data(), batch, cin, hw);
                let mut gw = vec![F::zero(); tw.numel()];
                gemm(
                    F::one(),
                    Mat::row_major(&xt, cin, batch * hw),
                    Mat::row_major(&dcols, cout * k * k, batch * hw).t(),
                    F::zero(),
                    &mut gw,
                );
                grads.push((*w, Tensor::from_vec(tw.shape(), gw)?));
            }
            if let Some(b) = b {
                let gb = channel_bias_grad(g.data(), batch, cout, oh * ow);
                grads.push((*b, Tensor::from_vec(&[cout], gb)?));
            }
        }
        Op::MaxPool2d { x, argmax } => {
            let shape = val(nodes, *x).shape();
            let mut gx = vec![F::zero(); shape.iter().product()];
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                gx[src] += gv;
            }
            grads.push((*x, Tensor::from_vec(shape, gx)?));
        }
        _ => unreachable!("not a conv op"),
    }
    Ok(grads)
}
