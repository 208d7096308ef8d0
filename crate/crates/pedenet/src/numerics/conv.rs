//! 2-D convolution (NCHW) via im2col and the deterministic GEMM.
//!
//! The im2col row index runs over (channel, ky, kx) in that order and GEMM
//! accumulates along ascending k, so each output element reproduces, fma for
//! fma, a naive quadruple loop over the zero-padded input. Padding slots
//! contribute `fma(w, 0, acc)`, which leaves the accumulator bits unchanged.

use crate::error::{Error, Result};
use crate::numerics::gemm::{gemm, gemm_prepacked, pack_a, GemmScratch, MatRef};
use crate::numerics::graph::{Ctx, Graph, OpNode, TensorId};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Expand one image `[C,H,W]` into `col[(c*kh+ky)*kw+kx, oy*OW+ox]`.
fn im2col<S: Scalar>(x: &[S], d: &ConvDims, col: &mut [S]) {
    let cols = d.cols();
    let mut row = 0;
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    let dst = &mut dst_row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = (c * d.h + iy as usize) * d.w;
                    for (ox, slot) in dst.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        *slot = if ix < 0 || ix >= d.w as isize {
                            S::zero()
                        } else {
                            x[src + ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the transpose of im2col: `dx[c,iy,ix] += dcol[row, col]`.
fn col2im_add<S: Scalar>(dcol: &[S], d: &ConvDims, dx: &mut [S]) {
    let cols = d.cols();
    let mut row = 0;
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let src_row = &dcol[row * cols..(row + 1) * cols];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = (c * d.h + iy as usize) * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dx[dst + ix as usize] += src_row[oy * d.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    /// `x [N,C,H,W] * w [F,C,kh,kw] + b [F]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (xsh, wsh, bsh) = (self.shape(x), self.shape(w), self.shape(b));
        if xsh.len() != 4 || wsh.len() != 4 || bsh.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "conv2d expects x[N,C,H,W], w[F,C,kh,kw], b[F]; got {xsh:?}, {wsh:?}, {bsh:?}"
            )));
        }
        if xsh[1] != wsh[1] || bsh[0] != wsh[0] {
            return Err(Error::InvalidArgument(format!(
                "conv2d channel mismatch: x{xsh:?} w{wsh:?} b{bsh:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if xsh[2] + 2 * pad < wsh[2] || xsh[3] + 2 * pad < wsh[3] {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {wsh:?} larger than padded input {xsh:?}"
            )));
        }
        let d = ConvDims {
            n: xsh[0],
            c: xsh[1],
            h: xsh[2],
            w: xsh[3],
            f: wsh[0],
            kh: wsh[2],
            kw: wsh[3],
            stride,
            pad,
            oh: conv_out_len(xsh[2], wsh[2], stride, pad),
            ow: conv_out_len(xsh[3], wsh[3], stride, pad),
        };
        let cols = d.cols();
        let (img, out_img) = (d.c * d.h * d.w, d.f * cols);
        let mut data = vec![S::zero(); d.n * out_img];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            let wp = pack_a(d.f, d.k(), MatRef::row_major(wd, d.k()));
            let mut col = vec![S::zero(); d.k() * cols];
            let mut scratch = GemmScratch::new();
            for n in 0..d.n {
                im2col(&xd[n * img..(n + 1) * img], &d, &mut col);
                let out = &mut data[n * out_img..(n + 1) * out_img];
                gemm_prepacked(&wp, cols, MatRef::row_major(&col, cols), out, cols, false, &mut scratch);
                for f in 0..d.f {
                    let bf = bd[f];
                    for v in &mut out[f * cols..(f + 1) * cols] {
                        *v = *v + bf;
                    }
                }
            }
        }
        let out = Tensor::raw(vec![d.n, d.f, d.oh, d.ow], data);
        let needs = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        Ok(self.push(out, needs, needs.then(|| Box::new(Conv2dOp { x, w, b, d }) as _)))
    }

    /// Cut each image into quadrants `[N,C,2h,2w] -> [4N,C,h,w]`; quadrant q
    /// in reading order (tl, tr, bl, br) becomes row 4n+q. Inverse of
    /// [`Graph::assemble2x2`].
    pub fn split2x2(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.shape(x);
        if sh.len() != 4 || sh[2] % 2 != 0 || sh[3] % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "split2x2 expects [N,C,2h,2w], got {sh:?}"
            )));
        }
        let (n, c, h2, w2) = (sh[0], sh[1], sh[2], sh[3]);
        let (h, w) = (h2 / 2, w2 / 2);
        let xd = self.value(x).data();
        let mut data = vec![S::zero(); xd.len()];
        for i in 0..n {
            for q in 0..4 {
                let (dy, dx) = (q / 2 * h, q % 2 * w);
                for ch in 0..c {
                    let dst = ((i * 4 + q) * c + ch) * h * w;
                    let src = (i * c + ch) * h2 * w2;
                    for y in 0..h {
                        let srow = src + (dy + y) * w2 + dx;
                        data[dst + y * w..dst + (y + 1) * w].copy_from_slice(&xd[srow..srow + w]);
                    }
                }
            }
        }
        let out = Tensor::raw(vec![4 * n, c, h, w], data);
        let needs = self.needs_grad(x);
        Ok(self.push(out, needs, needs.then(|| Box::new(Split2x2Op { x }) as _)))
    }

    /// Reassemble groups of four rows `[4N,C,h,w] -> [N,C,2h,2w]`; row 4n+q
    /// lands at quadrant q in reading order (tl, tr, bl, br).
    pub fn assemble2x2(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.shape(x);
        if sh.len() != 4 || sh[0] % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "assemble2x2 expects [4N,C,h,w], got {sh:?}"
            )));
        }
        let (n4, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let n = n4 / 4;
        let xd = self.value(x).data();
        let mut data = vec![S::zero(); xd.len()];
        for i in 0..n {
            for q in 0..4 {
                let (dy, dx) = (q / 2 * h, q % 2 * w);
                for ch in 0..c {
                    let src = ((i * 4 + q) * c + ch) * h * w;
                    let dst = (i * c + ch) * 4 * h * w;
                    for y in 0..h {
                        let drow = dst + (dy + y) * 2 * w + dx;
                        data[drow..drow + w].copy_from_slice(&xd[src + y * w..src + (y + 1) * w]);
                    }
                }
            }
        }
        let out = Tensor::raw(vec![n, c, 2 * h, 2 * w], data);
        let needs = self.needs_grad(x);
        Ok(self.push(out, needs, needs.then(|| Box::new(Assemble2x2Op { x }) as _)))
    }
}

struct Conv2dOp {
    x: TensorId,
    w: TensorId,
    b: TensorId,
    d: ConvDims,
}

impl<S: Scalar> OpNode<S> for Conv2dOp {
    fn backward(&self, g: &[S], _out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        let d = &self.d;
        let cols = d.cols();
        let (img, out_img, k) = (d.c * d.h * d.w, d.f * cols, d.k());
        let vals = ctx.vals;

        if ctx.needs(self.b) {
            let gb = ctx.grad_buf(self.b);
            for n in 0..d.n {
                for f in 0..d.f {
                    let base = n * out_img + f * cols;
                    let mut acc = S::zero();
                    for i in 0..cols {
                        acc += g[base + i];
                    }
                    gb[f] += acc;
                }
            }
        }

        let (need_w, need_x) = (ctx.needs(self.w), ctx.needs(self.x));
        if !need_w && !need_x {
            return;
        }
        let xd = vals[self.x].data();
        let wd = vals[self.w].data();
        let wt = need_x.then(|| pack_a(k, d.f, MatRef::transposed(wd, k)));
        let mut col = vec![S::zero(); k * cols];
        let mut dcol = vec![S::zero(); k * cols];
        let mut scratch = GemmScratch::new();
        // Two borrows of the gradient store can't be held at once, so the
        // image loop runs twice when both weight and input gradients are due.
        if need_w {
            let gw = ctx.grad_buf(self.w);
            for n in 0..d.n {
                im2col(&xd[n * img..(n + 1) * img], d, &mut col);
                let gn = &g[n * out_img..(n + 1) * out_img];
                // dW += G_n * col^T, image order fixed.
                gemm(
                    d.f,
                    cols,
                    k,
                    MatRef::row_major(gn, cols),
                    MatRef::transposed(&col, cols),
                    gw,
                    k,
                    true,
                );
            }
        }
        if need_x {
            let wt = wt.expect("packed above");
            let gx = ctx.grad_buf(self.x);
            for n in 0..d.n {
                let gn = &g[n * out_img..(n + 1) * out_img];
                gemm_prepacked(&wt, cols, MatRef::row_major(gn, cols), &mut dcol, cols, false, &mut scratch);
                col2im_add(&dcol, d, &mut gx[n * img..(n + 1) * img]);
            }
        }
    }
}

struct Split2x2Op {
    x: TensorId,
}

impl<S: Scalar> OpNode<S> for Split2x2Op {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let osh = out.shape();
        let (n4, c, h, w) = (osh[0], osh[1], osh[2], osh[3]);
        let n = n4 / 4;
        let (h2, w2) = (2 * h, 2 * w);
        let gx = ctx.grad_buf(self.x);
        for i in 0..n {
            for q in 0..4 {
                let (dy, dx) = (q / 2 * h, q % 2 * w);
                for ch in 0..c {
                    let src = ((i * 4 + q) * c + ch) * h * w;
                    let dst = (i * c + ch) * h2 * w2;
                    for y in 0..h {
                        let drow = dst + (dy + y) * w2 + dx;
                        for x in 0..w {
                            gx[drow + x] += g[src + y * w + x];
                        }
                    }
                }
            }
        }
    }
}

struct Assemble2x2Op {
    x: TensorId,
}

impl<S: Scalar> OpNode<S> for Assemble2x2Op {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let osh = out.shape();
        let (n, c, h2, w2) = (osh[0], osh[1], osh[2], osh[3]);
        let (h, w) = (h2 / 2, w2 / 2);
        let gx = ctx.grad_buf(self.x);
        for i in 0..n {
            for q in 0..4 {
                let (dy, dx) = (q / 2 * h, q % 2 * w);
                for ch in 0..c {
                    let dst = ((i * 4 + q) * c + ch) * h * w;
                    let src = (i * c + ch) * h2 * w2;
                    for y in 0..h {
                        let srow = src + (dy + y) * w2 + dx;
                        for x in 0..w {
                            gx[dst + y * w + x] += g[srow + x];
                        }
                    }
                }
            }
        }
    }
}
