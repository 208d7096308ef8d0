//! Linear-algebra and shape ops on the tape.

use crate::error::{Error, Result};
use crate::numerics::gemm::{gemm, MatRef};
use crate::numerics::graph::{split_axis, Ctx, Graph, OpNode, TensorId};
use crate::numerics::linalg::{cholesky, CholFactor};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// 2-D product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::InvalidArgument(format!(
                "matmul expects [m,k] x [k,n], got {ash:?} x {bsh:?}"
            )));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut data = vec![S::zero(); m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(self.value(a).data(), k),
            MatRef::row_major(self.value(b).data(), n),
            &mut data,
            n,
            false,
        );
        let out = Tensor::raw(vec![m, n], data);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, needs, needs.then(|| Box::new(MatmulOp { a, b, m, k, n }) as _)))
    }

    /// Batched product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::InvalidArgument(format!(
                "bmm expects [B,m,k] x [B,k,n], got {ash:?} x {bsh:?}"
            )));
        }
        let (bs, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut data = vec![S::zero(); bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                MatRef::row_major(&self.value(a).data()[i * m * k..(i + 1) * m * k], k),
                MatRef::row_major(&self.value(b).data()[i * k * n..(i + 1) * k * n], n),
                &mut data[i * m * n..(i + 1) * m * n],
                n,
                false,
            );
        }
        let out = Tensor::raw(vec![bs, m, n], data);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, needs, needs.then(|| Box::new(BmmOp { a, b, m, k, n }) as _)))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.shape(x);
        if sh.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose_last2 needs rank >= 2, got {sh:?}"
            )));
        }
        let out = transpose_last2_tensor(self.value(x));
        let needs = self.needs_grad(x);
        Ok(self.push(out, needs, needs.then(|| Box::new(TransposeOp { x }) as _)))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let out = Tensor::raw(shape.to_vec(), self.value(x).data().to_vec());
        let needs = self.needs_grad(x);
        Ok(self.push(out, needs, needs.then(|| Box::new(ReshapeOp { x }) as _)))
    }

    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &x in xs {
            let sh = self.shape(x);
            if sh.len() != first.len()
                || sh.iter().zip(&first).enumerate().any(|(i, (l, r))| i != axis && l != r)
            {
                return Err(Error::InvalidArgument(format!(
                    "concat shapes differ outside axis {axis}: {first:?} vs {sh:?}"
                )));
            }
            axis_total += sh[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = split_axis(&shape, axis)?;
        let mut data = vec![S::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &x in xs {
            let len = self.shape(x)[axis];
            let xd = self.value(x).data();
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
            }
            offset += len;
        }
        let out = Tensor::raw(shape, data);
        let needs = xs.iter().any(|&x| self.needs_grad(x));
        Ok(self.push(
            out,
            needs,
            needs.then(|| Box::new(ConcatOp { xs: xs.to_vec(), axis }) as _),
        ))
    }

    /// Contiguous row range `[start, start+len)` along axis 0.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sh = self.shape(x);
        if sh.is_empty() || start + len > sh[0] {
            return Err(Error::InvalidArgument(format!(
                "slice_rows {start}..{} out of range for shape {sh:?}",
                start + len
            )));
        }
        let inner: usize = sh[1..].iter().product();
        let mut shape = sh.to_vec();
        shape[0] = len;
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let out = Tensor::raw(shape, data);
        let needs = self.needs_grad(x);
        Ok(self.push(out, needs, needs.then(|| Box::new(SliceRowsOp { x, start }) as _)))
    }

    /// Gather rows along axis 0; duplicate indices are allowed.
    pub fn index_axis0(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let sh = self.shape(x);
        if sh.is_empty() {
            return Err(Error::InvalidArgument("index_axis0 on rank-0 tensor".into()));
        }
        let rows = sh[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for {rows} rows"
            )));
        }
        let inner: usize = sh[1..].iter().product();
        let mut shape = sh.to_vec();
        shape[0] = idx.len();
        let xd = self.value(x).data();
        let mut data = vec![S::zero(); idx.len() * inner];
        for (i, &r) in idx.iter().enumerate() {
            data[i * inner..(i + 1) * inner].copy_from_slice(&xd[r * inner..(r + 1) * inner]);
        }
        let out = Tensor::raw(shape, data);
        let needs = self.needs_grad(x);
        Ok(self.push(
            out,
            needs,
            needs.then(|| Box::new(IndexAxis0Op { x, idx: idx.to_vec() }) as _),
        ))
    }

    /// `[..., n, n] -> [..., n]` picking the diagonal of each trailing matrix.
    pub fn diag_part(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.shape(x);
        if sh.len() < 2 || sh[sh.len() - 1] != sh[sh.len() - 2] {
            return Err(Error::InvalidArgument(format!(
                "diag_part needs trailing square matrices, got {sh:?}"
            )));
        }
        let n = sh[sh.len() - 1];
        let batch: usize = sh[..sh.len() - 2].iter().product();
        let xd = self.value(x).data();
        let mut data = vec![S::zero(); batch * n];
        for b in 0..batch {
            for i in 0..n {
                data[b * n + i] = xd[b * n * n + i * n + i];
            }
        }
        let out = Tensor::raw(sh[..sh.len() - 1].to_vec(), data);
        let needs = self.needs_grad(x);
        Ok(self.push(out, needs, needs.then(|| Box::new(DiagPartOp { x }) as _)))
    }

    /// `0.5 * (X + X^T)` over the last two axes; output is exactly symmetric.
    pub fn symmetrize(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.shape(x);
        if sh.len() < 2 || sh[sh.len() - 1] != sh[sh.len() - 2] {
            return Err(Error::InvalidArgument(format!(
                "symmetrize needs trailing square matrices, got {sh:?}"
            )));
        }
        let out = symmetrize_tensor(self.value(x));
        let needs = self.needs_grad(x);
        Ok(self.push(out, needs, needs.then(|| Box::new(SymmetrizeOp { x }) as _)))
    }

    /// Solve `(sym(A) + eps I) X = B` through a Cholesky factor; `A` is
    /// `[n,n]`, `B` is `[n,m]`. `component` tags singularity errors.
    pub fn chol_solve(&mut self, a: TensorId, b: TensorId, component: usize) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || ash[0] != ash[1] || bsh.len() != 2 || bsh[0] != ash[0] {
            return Err(Error::InvalidArgument(format!(
                "chol_solve expects [n,n] and [n,m], got {ash:?} and {bsh:?}"
            )));
        }
        let (n, m) = (ash[0], bsh[1]);
        let factor = cholesky(self.value(a).data(), n, component)?;
        let x = factor.solve(self.value(b).data(), m);
        let out = Tensor::raw(vec![n, m], x);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(
            out,
            needs,
            needs.then(|| Box::new(CholSolveOp { a, b, factor, m }) as _),
        ))
    }

    /// `log det(sym(A) + eps I)` as a rank-0 tensor.
    pub fn chol_logdet(&mut self, a: TensorId, component: usize) -> Result<TensorId> {
        let ash = self.shape(a);
        if ash.len() != 2 || ash[0] != ash[1] {
            return Err(Error::InvalidArgument(format!(
                "chol_logdet expects [n,n], got {ash:?}"
            )));
        }
        let factor = cholesky(self.value(a).data(), ash[0], component)?;
        let out = Tensor::scalar(factor.logdet());
        let needs = self.needs_grad(a);
        Ok(self.push(out, needs, needs.then(|| Box::new(CholLogdetOp { a, factor }) as _)))
    }
}

fn transpose_last2_tensor<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let sh = x.shape();
    let (m, n) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    let batch: usize = sh[..sh.len() - 2].iter().product();
    let xd = x.data();
    let mut data = vec![S::zero(); xd.len()];
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                data[base + j * m + i] = xd[base + i * n + j];
            }
        }
    }
    let mut shape = sh.to_vec();
    shape.swap(sh.len() - 2, sh.len() - 1);
    Tensor::raw(shape, data)
}

fn symmetrize_tensor<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let sh = x.shape();
    let n = sh[sh.len() - 1];
    let batch: usize = sh[..sh.len() - 2].iter().product();
    let xd = x.data();
    let half = S::from_f64(0.5);
    let mut data = vec![S::zero(); xd.len()];
    for b in 0..batch {
        let base = b * n * n;
        for i in 0..n {
            for j in 0..n {
                data[base + i * n + j] = half * (xd[base + i * n + j] + xd[base + j * n + i]);
            }
        }
    }
    Tensor::raw(sh.to_vec(), data)
}

struct MatmulOp {
    a: TensorId,
    b: TensorId,
    m: usize,
    k: usize,
    n: usize,
}

impl<S: Scalar> OpNode<S> for MatmulOp {
    fn backward(&self, g: &[S], _out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        let vals = ctx.vals;
        let (m, k, n) = (self.m, self.k, self.n);
        if ctx.needs(self.a) {
            let bd = vals[self.b].data();
            let ga = ctx.grad_buf(self.a);
            // dA += G * B^T
            gemm(m, n, k, MatRef::row_major(g, n), MatRef::transposed(bd, n), ga, k, true);
        }
        if ctx.needs(self.b) {
            let ad = vals[self.a].data();
            let gb = ctx.grad_buf(self.b);
            // dB += A^T * G
            gemm(k, m, n, MatRef::transposed(ad, k), MatRef::row_major(g, n), gb, n, true);
        }
    }
}

struct BmmOp {
    a: TensorId,
    b: TensorId,
    m: usize,
    k: usize,
    n: usize,
}

impl<S: Scalar> OpNode<S> for BmmOp {
    fn backward(&self, g: &[S], _out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        let vals = ctx.vals;
        let (m, k, n) = (self.m, self.k, self.n);
        let bs = vals[self.a].shape()[0];
        if ctx.needs(self.a) {
            let bd = vals[self.b].data();
            let ga = ctx.grad_buf(self.a);
            for i in 0..bs {
                gemm(
                    m,
                    n,
                    k,
                    MatRef::row_major(&g[i * m * n..(i + 1) * m * n], n),
                    MatRef::transposed(&bd[i * k * n..(i + 1) * k * n], n),
                    &mut ga[i * m * k..(i + 1) * m * k],
                    k,
                    true,
                );
            }
        }
        if ctx.needs(self.b) {
            let ad = vals[self.a].data();
            let gb = ctx.grad_buf(self.b);
            for i in 0..bs {
                gemm(
                    k,
                    m,
                    n,
                    MatRef::transposed(&ad[i * m * k..(i + 1) * m * k], k),
                    MatRef::row_major(&g[i * m * n..(i + 1) * m * n], n),
                    &mut gb[i * k * n..(i + 1) * k * n],
                    n,
                    true,
                );
            }
        }
    }
}

struct TransposeOp {
    x: TensorId,
}

impl<S: Scalar> OpNode<S> for TransposeOp {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let gt = transpose_last2_tensor(&Tensor::raw(out.shape().to_vec(), g.to_vec()));
        let gx = ctx.grad_buf(self.x);
        for (dst, src) in gx.iter_mut().zip(gt.data()) {
            *dst += *src;
        }
    }
}

struct ReshapeOp {
    x: TensorId,
}

impl<S: Scalar> OpNode<S> for ReshapeOp {
    fn backward(&self, g: &[S], _out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let gx = ctx.grad_buf(self.x);
        for (dst, src) in gx.iter_mut().zip(g) {
            *dst += *src;
        }
    }
}

struct ConcatOp {
    xs: Vec<TensorId>,
    axis: usize,
}

impl<S: Scalar> OpNode<S> for ConcatOp {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        let (outer, total, inner) = split_axis(out.shape(), self.axis).expect("checked");
        let mut offset = 0;
        for &x in &self.xs {
            let len = ctx.vals[x].shape()[self.axis];
            if ctx.needs(x) {
                let gx = ctx.grad_buf(x);
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    let dst = o * len * inner;
                    for i in 0..len * inner {
                        gx[dst + i] += g[src + i];
                    }
                }
            }
            offset += len;
        }
    }
}

struct SliceRowsOp {
    x: TensorId,
    start: usize,
}

impl<S: Scalar> OpNode<S> for SliceRowsOp {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let inner: usize = out.shape()[1..].iter().product();
        let gx = ctx.grad_buf(self.x);
        let base = self.start * inner;
        for (i, &v) in g.iter().enumerate() {
            gx[base + i] += v;
        }
    }
}

struct IndexAxis0Op {
    x: TensorId,
    idx: Vec<usize>,
}

impl<S: Scalar> OpNode<S> for IndexAxis0Op {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let inner: usize = out.shape()[1..].iter().product();
        let gx = ctx.grad_buf(self.x);
        for (i, &r) in self.idx.iter().enumerate() {
            for c in 0..inner {
                gx[r * inner + c] += g[i * inner + c];
            }
        }
    }
}

struct DiagPartOp {
    x: TensorId,
}

impl<S: Scalar> OpNode<S> for DiagPartOp {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let n = *out.shape().last().expect("diag output has rank >= 1");
        let batch = out.numel() / n;
        let gx = ctx.grad_buf(self.x);
        for b in 0..batch {
            for i in 0..n {
                gx[b * n * n + i * n + i] += g[b * n + i];
            }
        }
    }
}

struct SymmetrizeOp {
    x: TensorId,
}

impl<S: Scalar> OpNode<S> for SymmetrizeOp {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let gt = symmetrize_tensor(&Tensor::raw(out.shape().to_vec(), g.to_vec()));
        let gx = ctx.grad_buf(self.x);
        for (dst, src) in gx.iter_mut().zip(gt.data()) {
            *dst += *src;
        }
    }
}

/// Fold an unconstrained matrix gradient `dm` into the gradient of a tensor
/// that was read as `sym(lower(A))`: strictly-lower entries collect both
/// mirror contributions, the upper triangle stays untouched.
fn fold_sym_into<S: Scalar>(dm: &[S], n: usize, scale: S, ga: &mut [S]) {
    for i in 0..n {
        ga[i * n + i] += scale * dm[i * n + i];
        for j in 0..i {
            ga[i * n + j] += scale * (dm[i * n + j] + dm[j * n + i]);
        }
    }
}

struct CholSolveOp<S> {
    a: TensorId,
    b: TensorId,
    factor: CholFactor<S>,
    m: usize,
}

impl<S: Scalar> OpNode<S> for CholSolveOp<S> {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        let n = self.factor.n();
        let w = self.factor.solve(g, self.m); // (sym(A)+eps I)^-1 G
        if ctx.needs(self.b) {
            let gb = ctx.grad_buf(self.b);
            for (dst, src) in gb.iter_mut().zip(&w) {
                *dst += *src;
            }
        }
        if ctx.needs(self.a) {
            // dM = -W X^T
            let mut dm = vec![S::zero(); n * n];
            gemm(
                n,
                self.m,
                n,
                MatRef::row_major(&w, self.m),
                MatRef::transposed(out.data(), self.m),
                &mut dm,
                n,
                false,
            );
            let ga = ctx.grad_buf(self.a);
            fold_sym_into(&dm, n, -S::one(), ga);
        }
    }
}

struct CholLogdetOp<S> {
    a: TensorId,
    factor: CholFactor<S>,
}

impl<S: Scalar> OpNode<S> for CholLogdetOp<S> {
    fn backward(&self, g: &[S], _out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.a) {
            return;
        }
        let n = self.factor.n();
        let inv = self.factor.inverse();
        let ga = ctx.grad_buf(self.a);
        fold_sym_into(&inv, n, g[0], ga);
    }
}
