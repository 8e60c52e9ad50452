use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Node, Op, Var};
use crate::tensor::Tensor;

use super::{val, Grads};

/// Source taps along one axis for half-pixel (align-corners = false) sampling.
struct Taps<F> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<F>,
}

fn taps<F: Float>(input: usize, output: usize) -> Taps<F> {
    let scale = input as f64 / output as f64;
    let mut t = Taps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        w_hi: Vec::with_capacity(output),
    };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.w_hi.push(F::of(src - lo as f64));
    }
    t
}

impl<F: Float> Graph<F> {
    /// Bilinear resize of an NCHW tensor with half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 || out_h == 0 || out_w == 0 {
            return Err(TensorError::invalid(
                "resize_bilinear",
                format!("cannot resize {s:?} to {out_h}x{out_w}"),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ty, tx) = (taps::<F>(h, out_h), taps::<F>(w, out_w));
        let d = t.data();
        let mut out = vec![F::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for oy in 0..out_h {
                let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w_hi[oy]);
                for ox in 0..out_w {
                    let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
                    let top = src[y0 * w + x0] * (F::one() - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (F::one() - wx) + src[y1 * w + x1] * wx;
                    dst[oy * out_w + ox] = top * (F::one() - wy) + bot * wy;
                }
            }
        }
        let value = Tensor::from_vec(&[s[0], s[1], out_h, out_w], out)?;
        Ok(self.push(value, Op::ResizeBilinear(x)))
    }
}

pub(crate) fn backward<F: Float>(nodes: &[Node<F>], i: usize, g: &Tensor<F>) -> Result<Grads<F>> {
    let Op::ResizeBilinear(x) = &nodes[i].op else {
        unreachable!("not a resize op")
    };
    let s = val(nodes, *x).shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (out_h, out_w) = (g.shape()[2], g.shape()[3]);
    let (ty, tx) = (taps::<F>(h, out_h), taps::<F>(w, out_w));
    let gd = g.data();
    let mut dx = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w_hi[oy]);
            for ox in 0..out_w {
                let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
                let gv = src[oy * out_w + ox];
                dst[y0 * w + x0] += gv * (F::one() - wy) * (F::one() - wx);
                dst[y0 * w + x1] += gv * (F::one() - wy) * wx;
                dst[y1 * w + x0] += gv * wy * (F::one() - wx);
                dst[y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    Ok(vec![(*x, Tensor::from_vec(s, dx)?)])
}
