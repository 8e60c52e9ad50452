//! Low-level numeric kernels shared by the graph operations.
//!
//! Every kernel writes each output element from exactly one task with a
//! fixed accumulation order, so results do not depend on the thread count.
//! With the `parallel` feature disabled the same loops run sequentially.

use crate::float::Float;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows of `gemm` output handed to one task.
const GEMM_ROWS_PER_TASK: usize = 64;

/// Above this many elements a transposed `B` is read in place by
/// [`gemm_dots`] rather than packed; packing a matrix that does not fit in
/// cache costs more than the multiply when `A` has few rows.
const GEMM_DOTS_MIN_ELEMS: usize = 1 << 22;

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len` pieces of `data`.
pub fn for_each_chunk<T, Fn>(data: &mut [T], chunk_len: usize, f: Fn)
where
    T: Send,
    Fn: FnMut(usize, &mut [T]) + Send + Sync + Clone,
{
    if data.is_empty() || chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each_with(f, |f, (i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut f = f;
        for (i, c) in data.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_indexed<T, Fn>(n: usize, f: Fn) -> Vec<T>
where
    T: Send,
    Fn: (FnMut(usize) -> T) + Send + Sync + Clone,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map_with(f, |f, i| f(i)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy, Debug)]
pub struct Mat<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> Mat<'a, F> {
    pub fn row_major(data: &'a [F], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }

    fn offset_rows(self, start: usize, rows: usize) -> Self {
        let begin = (start * self.rs).min(self.data.len());
        Mat {
            data: &self.data[begin..],
            rows,
            ..self
        }
    }
}

/// `C <- alpha * A B + beta * C` where `c` is row-major `A.rows x B.cols`.
pub fn gemm<F: Float>(alpha: F, a: Mat<'_, F>, b: Mat<'_, F>, beta: F, c: &mut [F]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.fits() && b.fits(), "gemm view out of bounds");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v = if beta == F::zero() { F::zero() } else { *v * beta };
        }
        return;
    }
    // Chosen by the shape of `B` alone, so a row of `C` never depends on
    // how many rows it was computed with.
    if a.cs == 1 && b.rs == 1 && k * n >= GEMM_DOTS_MIN_ELEMS {
        gemm_dots(alpha, a, b, beta, c);
        return;
    }
    let run = |row0: usize, chunk: &mut [F]| {
        let rows = chunk.len() / n;
        let a = a.offset_rows(row0, rows);
        // SAFETY: bounds of every view were checked above, `chunk` is an
        // exclusive row-major block of `rows x n`.
        unsafe {
            F::gemm_raw(
                rows,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    };
    if m <= GEMM_ROWS_PER_TASK || cfg!(not(feature = "parallel")) {
        run(0, c);
    } else {
        for_each_chunk(c, GEMM_ROWS_PER_TASK * n, move |i, chunk| {
            run(i * GEMM_ROWS_PER_TASK, chunk)
        });
    }
}

/// `gemm` for row-contiguous `A` and column-contiguous `B`: every output is
/// one dot product with a fixed lane order, and each column of `B` is
/// streamed once per block of four rows.
fn gemm_dots<F: Float>(alpha: F, a: Mat<'_, F>, b: Mat<'_, F>, beta: F, c: &mut [F]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let row = |i: usize| &a.data[i * a.rs..i * a.rs + k];
    let col = |j: usize| &b.data[j * b.cs..j * b.cs + k];
    let mut store = |i: usize, j: usize, d: F| {
        let o = &mut c[i * n + j];
        *o = if beta == F::zero() { alpha * d } else { alpha * d + beta * *o };
    };
    let mut i = 0;
    while i < m {
        let take = (m - i).min(4);
        for j in 0..n {
            let y = col(j);
            match take {
                4 => {
                    let d = dots([row(i), row(i + 1), row(i + 2), row(i + 3)], y);
                    (0..4).for_each(|r| store(i + r, j, d[r]));
                }
                3 => {
                    let d = dots([row(i), row(i + 1), row(i + 2)], y);
                    (0..3).for_each(|r| store(i + r, j, d[r]));
                }
                2 => {
                    let d = dots([row(i), row(i + 1)], y);
                    (0..2).for_each(|r| store(i + r, j, d[r]));
                }
                _ => store(i, j, dots([row(i)], y)[0]),
            }
        }
        i += take;
    }
}

/// `R` dot products against a shared `y`, each accumulated in eight lanes
/// that are summed pairwise, then the tail.
#[inline(always)]
fn dots<F: Float, const R: usize>(xs: [&[F]; R], y: &[F]) -> [F; R] {
    const L: usize = 8;
    let body = y.len() / L * L;
    let mut acc = [[F::zero(); L]; R];
    for p in (0..body).step_by(L) {
        let yv = &y[p..p + L];
        for r in 0..R {
            let xv = &xs[r][p..p + L];
            for l in 0..L {
                acc[r][l] += xv[l] * yv[l];
            }
        }
    }
    let mut out = [F::zero(); R];
    for r in 0..R {
        let a = &acc[r];
        let mut s = ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
        for p in body..y.len() {
            s += xs[r][p] * y[p];
        }
        out[r] = s;
    }
    out
}

/// Geometry of a square-kernel sliding window over a `h x w` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    /// `None` when the padded input is smaller than the kernel.
    pub fn new(h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
            return None;
        }
        Some(Window {
            kernel,
            stride,
            padding,
            h,
            w,
            oh: (h + 2 * padding - kernel) / stride + 1,
            ow: (w + 2 * padding - kernel) / stride + 1,
        })
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `batch` images of `channels` planes into a `(channels*k*k) x (batch*oh*ow)`
/// row-major column matrix.
pub fn im2col<F: Float>(x: &[F], batch: usize, channels: usize, win: &Window) -> Vec<F> {
    let k = win.kernel;
    let l = win.out_len();
    let ld = batch * l;
    let plane = win.h * win.w;
    let mut cols = vec![F::zero(); channels * k * k * ld];
    for_each_chunk(&mut cols, ld, move |row, out| {
        let c = row / (k * k);
        let ki = (row / k) % k;
        let kj = row % k;
        for b in 0..batch {
            let src = &x[(b * channels + c) * plane..(b * channels + c + 1) * plane];
            let dst = &mut out[b * l..(b + 1) * l];
            for oy in 0..win.oh {
                let iy = (oy * win.stride + ki) as isize - win.padding as isize;
                if iy < 0 || iy >= win.h as isize {
                    continue;
                }
                let src_row = &src[iy as usize * win.w..(iy as usize + 1) * win.w];
                for ox in 0..win.ow {
                    let ix = (ox * win.stride + kj) as isize - win.padding as isize;
                    if ix >= 0 && ix < win.w as isize {
                        dst[oy * win.ow + ox] = src_row[ix as usize];
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: folds columns back into `batch x channels x h x w`,
/// summing overlapping contributions.
pub fn col2im<F: Float>(cols: &[F], batch: usize, channels: usize, win: &Window) -> Vec<F> {
    let k = win.kernel;
    let l = win.out_len();
    let ld = batch * l;
    let plane = win.h * win.w;
    let mut out = vec![F::zero(); batch * channels * plane];
    for_each_chunk(&mut out, plane, move |bc, dst| {
        let b = bc / channels;
        let c = bc % channels;
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld + b * l..row * ld + (b + 1) * l];
                for oy in 0..win.oh {
                    let iy = (oy * win.stride + ki) as isize - win.padding as isize;
                    if iy < 0 || iy >= win.h as isize {
                        continue;
                    }
                    for ox in 0..win.ow {
                        let ix = (ox * win.stride + kj) as isize - win.padding as isize;
                        if ix >= 0 && ix < win.w as isize {
                            dst[iy as usize * win.w + ix as usize] += src[oy * win.ow + ox];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Output positions `o` in `0..n_out` whose tap `o * stride + off` lands
/// inside `0..n_in`.
fn tap_range(off: isize, stride: usize, n_in: usize, n_out: usize) -> std::ops::Range<usize> {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let end = n_in as isize - off;
    let hi = if end <= 0 { 0 } else { (((end + s - 1) / s) as usize).min(n_out) };
    lo.min(hi)..hi
}

/// Depthwise convolution without bias: plane `c` of every image is
/// correlated with its own `k x k` kernel `w[c]`.
pub fn depthwise_conv<F: Float>(x: &[F], w: &[F], batch: usize, ch: usize, win: &Window) -> Vec<F> {
    let (k, s, p) = (win.kernel, win.stride, win.padding as isize);
    let plane = win.h * win.w;
    let mut out = vec![F::zero(); batch * ch * win.out_len()];
    for_each_chunk(&mut out, win.out_len(), move |bc, dst| {
        let src = &x[bc * plane..(bc + 1) * plane];
        let wk = &w[(bc % ch) * k * k..(bc % ch + 1) * k * k];
        for ki in 0..k {
            let rows = tap_range(ki as isize - p, s, win.h, win.oh);
            for kj in 0..k {
                let cols = tap_range(kj as isize - p, s, win.w, win.ow);
                let wv = wk[ki * k + kj];
                for oy in rows.clone() {
                    let iy = (oy * s + ki) as isize - p;
                    let src_row = &src[iy as usize * win.w..];
                    let dst_row = &mut dst[oy * win.ow..(oy + 1) * win.ow];
                    for ox in cols.clone() {
                        let ix = ((ox * s + kj) as isize - p) as usize;
                        dst_row[ox] += wv * src_row[ix];
                    }
                }
            }
        }
    });
    out
}

/// Input gradient of [`depthwise_conv`].
pub fn depthwise_conv_grad_input<F: Float>(g: &[F], w: &[F], batch: usize, ch: usize, win: &Window) -> Vec<F> {
    let (k, s, p) = (win.kernel, win.stride, win.padding as isize);
    let l = win.out_len();
    let mut out = vec![F::zero(); batch * ch * win.h * win.w];
    for_each_chunk(&mut out, win.h * win.w, move |bc, dst| {
        let gp = &g[bc * l..(bc + 1) * l];
        let wk = &w[(bc % ch) * k * k..(bc % ch + 1) * k * k];
        for ki in 0..k {
            let rows = tap_range(ki as isize - p, s, win.h, win.oh);
            for kj in 0..k {
                let cols = tap_range(kj as isize - p, s, win.w, win.ow);
                let wv = wk[ki * k + kj];
                for oy in rows.clone() {
                    let iy = ((oy * s + ki) as isize - p) as usize;
                    for ox in cols.clone() {
                        let ix = ((ox * s + kj) as isize - p) as usize;
                        dst[iy * win.w + ix] += wv * gp[oy * win.ow + ox];
                    }
                }
            }
        }
    });
    out
}

/// Weight gradient of [`depthwise_conv`], `ch x k x k`.
pub fn depthwise_conv_grad_weight<F: Float>(g: &[F], x: &[F], batch: usize, ch: usize, win: &Window) -> Vec<F> {
    let (k, s, p) = (win.kernel, win.stride, win.padding as isize);
    let (l, plane) = (win.out_len(), win.h * win.w);
    let mut out = vec![F::zero(); ch * k * k];
    for_each_chunk(&mut out, k * k, move |c, dst| {
        for b in 0..batch {
            let gp = &g[(b * ch + c) * l..(b * ch + c + 1) * l];
            let src = &x[(b * ch + c) * plane..(b * ch + c + 1) * plane];
            for ki in 0..k {
                let rows = tap_range(ki as isize - p, s, win.h, win.oh);
                for kj in 0..k {
                    let cols = tap_range(kj as isize - p, s, win.w, win.ow);
                    let mut acc = F::zero();
                    for oy in rows.clone() {
                        let iy = ((oy * s + ki) as isize - p) as usize;
                        for ox in cols.clone() {
                            let ix = ((ox * s + kj) as isize - p) as usize;
                            acc += gp[oy * win.ow + ox] * src[iy * win.w + ix];
                        }
                    }
                    dst[ki * k + kj] += acc;
                }
            }
        }
    });
    out
}

/// `(batch, ch, len)` to `(ch, batch*len)`.
pub fn batch_to_channel_major<F: Float>(x: &[F], batch: usize, ch: usize, len: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for_each_chunk(&mut out, batch * len, move |c, dst| {
        for b in 0..batch {
            let src = &x[(b * ch + c) * len..(b * ch + c + 1) * len];
            dst[b * len..(b + 1) * len].copy_from_slice(src);
        }
    });
    out
}

/// `(ch, batch*len)` to `(batch, ch, len)`.
pub fn channel_to_batch_major<F: Float>(x: &[F], batch: usize, ch: usize, len: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for_each_chunk(&mut out, len, move |bc, dst| {
        let b = bc / ch;
        let c = bc % ch;
        dst.copy_from_slice(&x[c * batch * len + b * len..c * batch * len + (b + 1) * len]);
    });
    out
}

/// Numpy-style broadcast of two shapes, aligned on the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading `shape` while iterating `out` (zero on broadcast axes).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = crate::tensor::strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits `out` in row-major order, yielding the linear index plus the
/// matching offsets into two broadcast operands.
pub fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums a tensor of shape `from` down to the broadcast source `to`.
pub fn reduce_to_shape<F: Float>(g: &[F], from: &[usize], to: &[usize]) -> Vec<F> {
    if from == to {
        return g.to_vec();
    }
    let st = broadcast_strides(to, from);
    let mut out = vec![F::zero(); to.iter().product()];
    for_each_broadcast(from, &st, &st, |o, i, _| out[i] += g[o]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposed_views() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 4x3, used transposed
        let mut c = vec![1.0; 8];
        gemm(
            1.0,
            Mat::row_major(&a, 2, 3),
            Mat::row_major(&b, 4, 3).t(),
            2.0,
            &mut c,
        );
        for i in 0..2 {
            for j in 0..4 {
                let naive: f64 = (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum();
                assert_eq!(c[i * 4 + j], naive + 2.0);
            }
        }
    }

    #[test]
    fn large_transposed_gemm_is_exact_per_row() {
        // 2048 x 2051 crosses the in-place threshold; k is not a multiple
        // of the lane count.
        let (k, n) = (2051, 2048);
        let w: Vec<f32> = (0..n * k).map(|v| ((v % 97) as f32 - 48.0) * 0.01).collect();
        let x: Vec<f32> = (0..7 * k).map(|v| ((v % 13) as f32 - 6.0) * 0.1).collect();
        let run = |rows: usize| {
            let mut c = vec![0.0f32; rows * n];
            gemm(1.0, Mat::row_major(&x[..rows * k], rows, k), Mat::row_major(&w, n, k).t(), 0.0, &mut c);
            c
        };
        let all = run(7);
        for rows in [1, 2, 3, 4, 5] {
            assert_eq!(run(rows)[..], all[..rows * n], "{rows} rows");
        }
        for (i, j) in [(0, 0), (3, 1000), (6, n - 1)] {
            let naive: f64 = (0..k).map(|p| x[i * k + p] as f64 * w[j * k + p] as f64).sum();
            assert!((all[i * n + j] as f64 - naive).abs() < 1e-3, "{i},{j}");
        }
        let mut c = vec![1.0f32; n];
        gemm(2.0, Mat::row_major(&x[..k], 1, k), Mat::row_major(&w, n, k).t(), 0.5, &mut c);
        assert!(c.iter().zip(&all[..n]).all(|(c, d)| *c == 2.0 * d + 0.5));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window::new(5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 20).map(|v| (v as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, 2, 3, &win);
        let y: Vec<f64> = (0..cols.len()).map(|v| (v as f64 * 0.11).cos()).collect();
        let back = col2im(&y, 2, 3, &win);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn depthwise_matches_direct_sum() {
        for (h, w, k, stride, pad) in [(5, 6, 3, 1, 1), (7, 7, 7, 1, 3), (6, 5, 3, 2, 0), (4, 4, 3, 2, 2)] {
            let win = Window::new(h, w, k, stride, pad).unwrap();
            let (batch, ch) = (2, 3);
            let x: Vec<f64> = (0..batch * ch * h * w).map(|v| (v as f64 * 0.37).sin()).collect();
            let wt: Vec<f64> = (0..ch * k * k).map(|v| (v as f64 * 0.91).cos()).collect();
            let y = depthwise_conv(&x, &wt, batch, ch, &win);
            for b in 0..batch {
                for c in 0..ch {
                    for oy in 0..win.oh {
                        for ox in 0..win.ow {
                            let mut acc = 0.0;
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[(c * k + ki) * k + kj]
                                            * x[((b * ch + c) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            let got = y[((b * ch + c) * win.oh + oy) * win.ow + ox];
                            assert!((got - acc).abs() < 1e-12);
                        }
                    }
                }
            }
            // Both gradients are adjoints of the forward map.
            let gy: Vec<f64> = (0..y.len()).map(|v| (v as f64 * 0.13).cos()).collect();
            let gx = depthwise_conv_grad_input(&gy, &wt, batch, ch, &win);
            let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
            let gw = depthwise_conv_grad_weight(&gy, &x, batch, ch, &win);
            let rhs: f64 = wt.iter().zip(&gw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
        let g = vec![1.0f64; 24];
        assert_eq!(reduce_to_shape(&g, &[2, 4, 3], &[4, 1]), vec![6.0; 4]);
    }

    #[test]
    fn layout_transposes_are_inverse() {
        let x: Vec<f32> = (0..2 * 3 * 5).map(|v| v as f32).collect();
        let cm = batch_to_channel_major(&x, 2, 3, 5);
        assert_eq!(cm[5], x[15]);
        assert_eq!(channel_to_batch_major(&cm, 2, 3, 5), x);
    }
}
