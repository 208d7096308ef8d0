//! Reverse-mode autodiff on an append-only tape.
//!
//! Every op pushes a node; insertion order is already topological, so
//! `backward` just walks the tape in reverse. Gradient buffers are allocated
//! lazily and only for nodes on a differentiable path, which lets the first
//! conv layer skip the (useless) gradient with respect to raw image data.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

pub type TensorId = usize;

/// Values and gradient buffers visible to an op's backward rule. Input ids
/// are always smaller than the output id, so `grads` is the tape prefix
/// strictly below the node being differentiated.
pub(crate) struct Ctx<'a, S: Scalar> {
    pub vals: &'a [Tensor<S>],
    pub needs: &'a [bool],
    grads: &'a mut [Option<Vec<S>>],
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn needs(&self, id: TensorId) -> bool {
        self.needs[id]
    }

    /// Zero-initialized gradient buffer for `id`, created on first touch.
    pub fn grad_buf(&mut self, id: TensorId) -> &mut [S] {
        let numel = self.vals[id].numel();
        self.grads[id].get_or_insert_with(|| vec![S::zero(); numel])
    }
}

pub(crate) trait OpNode<S: Scalar> {
    /// Accumulate input gradients given the output gradient `g` and the
    /// forward output `out`.
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>);
}

pub struct Graph<S: Scalar> {
    values: Vec<Tensor<S>>,
    needs: Vec<bool>,
    ops: Vec<Option<Box<dyn OpNode<S>>>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { values: Vec::new(), needs: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<S>,
        needs: bool,
        op: Option<Box<dyn OpNode<S>>>,
    ) -> TensorId {
        self.values.push(value);
        self.needs.push(needs);
        self.ops.push(op);
        self.grads.push(None);
        self.values.len() - 1
    }

    /// Leaf that participates in differentiation (parameters).
    pub fn input(&mut self, value: Tensor<S>) -> TensorId {
        self.push(value, true, None)
    }

    /// Leaf treated as constant data (images, targets).
    pub fn constant(&mut self, value: Tensor<S>) -> TensorId {
        self.push(value, false, None)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.values[id]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.values[id].shape()
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.needs[id]
    }

    pub fn grad(&self, id: TensorId) -> Result<&[S]> {
        self.grads[id]
            .as_deref()
            .ok_or_else(|| Error::MissingGradient(format!("no gradient for tensor {id}")))
    }

    /// Run reverse accumulation from a scalar root. Call once per tape.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.values[root].numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be a scalar, got shape {:?}",
                self.values[root].shape()
            )));
        }
        if !self.needs[root] {
            return Err(Error::MissingGradient(
                "backward root does not depend on any differentiable input".into(),
            ));
        }
        self.grads[root] = Some(vec![S::one()]);
        for id in (0..=root).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            let Some(op) = &self.ops[id] else { continue };
            let (below, at) = self.grads.split_at_mut(id);
            let g = at[0].as_deref().expect("checked above");
            let mut ctx = Ctx { vals: &self.values, needs: &self.needs, grads: below };
            op.backward(g, &self.values[id], &mut ctx);
        }
        Ok(())
    }

    pub(crate) fn unary(
        &mut self,
        x: TensorId,
        kind: UnaryKind,
    ) -> TensorId {
        let xv = &self.values[x];
        let data = xv.data().iter().map(|&v| kind.apply(v)).collect();
        let out = Tensor::raw(xv.shape().to_vec(), data);
        let needs = self.needs[x];
        self.push(out, needs, needs.then(|| Box::new(UnaryOp { x, kind }) as Box<dyn OpNode<S>>))
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Neg)
    }
    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Exp)
    }
    pub fn ln(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Ln)
    }
    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Tanh)
    }
    pub fn recip(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Recip)
    }
    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> TensorId {
        self.unary(x, UnaryKind::LeakyRelu(slope))
    }
    pub fn clamp_min(&mut self, x: TensorId, floor: f64) -> TensorId {
        self.unary(x, UnaryKind::ClampMin(floor))
    }
    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        self.unary(x, UnaryKind::Scale(factor))
    }

    fn binary(&mut self, a: TensorId, b: TensorId, kind: BinKind) -> Result<TensorId> {
        let (av, bv) = (&self.values[a], &self.values[b]);
        let out_shape = broadcast_shape(av.shape(), bv.shape())?;
        let mut data = vec![S::zero(); out_shape.iter().product()];
        if av.shape() == bv.shape() {
            for ((o, &x), &y) in data.iter_mut().zip(av.data()).zip(bv.data()) {
                *o = kind.apply(x, y);
            }
        } else {
            let (ad, bd) = (av.data(), bv.data());
            for_each_bcast(&out_shape, av.shape(), bv.shape(), |oi, ai, bi| {
                data[oi] = kind.apply(ad[ai], bd[bi]);
            });
        }
        let out = Tensor::raw(out_shape, data);
        let needs = self.needs[a] || self.needs[b];
        Ok(self.push(out, needs, needs.then(|| Box::new(BinaryOp { a, b, kind }) as _)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinKind::Add)
    }
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinKind::Sub)
    }
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinKind::Mul)
    }
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinKind::Div)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let total = self.values[x].data().iter().copied().sum();
        let needs = self.needs[x];
        self.push(Tensor::scalar(total), needs, needs.then(|| Box::new(SumAllOp { x }) as _))
    }

    /// Arithmetic mean over every element.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.values[x].numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&mut self, x: TensorId, axis: usize, keepdim: bool) -> Result<TensorId> {
        let xv = &self.values[x];
        let (outer, len, inner) = split_axis(xv.shape(), axis)?;
        let mut data = vec![S::zero(); outer * inner];
        let xd = xv.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let ob = o * inner;
                for i in 0..inner {
                    data[ob + i] += xd[base + i];
                }
            }
        }
        let mut shape: Vec<usize> = xv.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let out = Tensor::raw(shape, data);
        let needs = self.needs[x];
        Ok(self.push(out, needs, needs.then(|| Box::new(SumAxisOp { x, axis }) as _)))
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xv = &self.values[x];
        let (outer, len, inner) = split_axis(xv.shape(), axis)?;
        if len == 0 {
            return Err(Error::InvalidArgument("softmax over empty axis".into()));
        }
        let xd = xv.data();
        let mut data = vec![S::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut m = S::neg_infinity();
                for l in 0..len {
                    let v = xd[at(l)];
                    if v.is_nan() {
                        return Err(Error::InvalidArgument("softmax input contains NaN".into()));
                    }
                    if v > m {
                        m = v;
                    }
                }
                let mut z = S::zero();
                for l in 0..len {
                    let e = (xd[at(l)] - m).exp();
                    data[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    data[at(l)] /= z;
                }
            }
        }
        let out = Tensor::raw(xv.shape().to_vec(), data);
        let needs = self.needs[x];
        Ok(self.push(out, needs, needs.then(|| Box::new(SoftmaxOp { x, axis }) as _)))
    }

    /// `ln(sum(exp(x)))` along `axis`, which is removed from the shape.
    pub fn logsumexp(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xv = &self.values[x];
        let (outer, len, inner) = split_axis(xv.shape(), axis)?;
        if len == 0 {
            return Err(Error::InvalidArgument("logsumexp over empty axis".into()));
        }
        let xd = xv.data();
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut m = S::neg_infinity();
                for l in 0..len {
                    if xd[at(l)] > m {
                        m = xd[at(l)];
                    }
                }
                let out = if m == S::neg_infinity() {
                    m
                } else {
                    let mut z = S::zero();
                    for l in 0..len {
                        z += (xd[at(l)] - m).exp();
                    }
                    m + z.ln()
                };
                data[o * inner + i] = out;
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::raw(shape, data);
        let needs = self.needs[x];
        Ok(self.push(out, needs, needs.then(|| Box::new(LogSumExpOp { x, axis }) as _)))
    }
}

#[derive(Clone, Copy)]
pub(crate) enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Tanh,
    Recip,
    LeakyRelu(f64),
    ClampMin(f64),
    Scale(f64),
}

impl UnaryKind {
    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Ln => x.ln(),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Recip => x.recip(),
            UnaryKind::LeakyRelu(a) => {
                if x > S::zero() {
                    x
                } else {
                    S::from_f64(a) * x
                }
            }
            UnaryKind::ClampMin(c) => x.max(S::from_f64(c)),
            UnaryKind::Scale(c) => S::from_f64(c) * x,
        }
    }

    /// dL/dx given x, y = f(x), and dL/dy.
    fn vjp<S: Scalar>(self, x: S, y: S, g: S) -> S {
        match self {
            UnaryKind::Neg => -g,
            UnaryKind::Exp => g * y,
            UnaryKind::Ln => g / x,
            UnaryKind::Tanh => g * (S::one() - y * y),
            UnaryKind::Recip => -g * y * y,
            UnaryKind::LeakyRelu(a) => {
                if x > S::zero() {
                    g
                } else {
                    g * S::from_f64(a)
                }
            }
            UnaryKind::ClampMin(c) => {
                if x > S::from_f64(c) {
                    g
                } else {
                    S::zero()
                }
            }
            UnaryKind::Scale(c) => g * S::from_f64(c),
        }
    }
}

struct UnaryOp {
    x: TensorId,
    kind: UnaryKind,
}

impl<S: Scalar> OpNode<S> for UnaryOp {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let vals = ctx.vals;
        let xd = vals[self.x].data();
        let yd = out.data();
        let gx = ctx.grad_buf(self.x);
        for i in 0..g.len() {
            gx[i] += self.kind.vjp(xd[i], yd[i], g[i]);
        }
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn apply<S: Scalar>(self, a: S, b: S) -> S {
        match self {
            BinKind::Add => a + b,
            BinKind::Sub => a - b,
            BinKind::Mul => a * b,
            BinKind::Div => a / b,
        }
    }

    fn vjp_a<S: Scalar>(self, _a: S, b: S, g: S) -> S {
        match self {
            BinKind::Add | BinKind::Sub => g,
            BinKind::Mul => g * b,
            BinKind::Div => g / b,
        }
    }

    fn vjp_b<S: Scalar>(self, a: S, b: S, g: S) -> S {
        match self {
            BinKind::Add => g,
            BinKind::Sub => -g,
            BinKind::Mul => g * a,
            BinKind::Div => -g * a / (b * b),
        }
    }
}

struct BinaryOp {
    a: TensorId,
    b: TensorId,
    kind: BinKind,
}

impl<S: Scalar> OpNode<S> for BinaryOp {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        let vals = ctx.vals;
        let (ash, bsh) = (vals[self.a].shape().to_vec(), vals[self.b].shape().to_vec());
        let (ad, bd) = (vals[self.a].data(), vals[self.b].data());
        let osh = out.shape();
        // One pass per input; the two may alias (x * x), so never borrow both
        // gradient buffers at once.
        let uniform = ash == osh && bsh == osh;
        if ctx.needs(self.a) {
            let kind = self.kind;
            let ga = ctx.grad_buf(self.a);
            if uniform {
                for i in 0..g.len() {
                    ga[i] += kind.vjp_a(ad[i], bd[i], g[i]);
                }
            } else {
                for_each_bcast(osh, &ash, &bsh, |oi, ai, bi| {
                    ga[ai] += kind.vjp_a(ad[ai], bd[bi], g[oi]);
                });
            }
        }
        if ctx.needs(self.b) {
            let kind = self.kind;
            let gb = ctx.grad_buf(self.b);
            if uniform {
                for i in 0..g.len() {
                    gb[i] += kind.vjp_b(ad[i], bd[i], g[i]);
                }
            } else {
                for_each_bcast(osh, &ash, &bsh, |oi, ai, bi| {
                    gb[bi] += kind.vjp_b(ad[ai], bd[bi], g[oi]);
                });
            }
        }
    }
}

struct SumAllOp {
    x: TensorId,
}

impl<S: Scalar> OpNode<S> for SumAllOp {
    fn backward(&self, g: &[S], _out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let gv = g[0];
        for v in ctx.grad_buf(self.x) {
            *v += gv;
        }
    }
}

struct SumAxisOp {
    x: TensorId,
    axis: usize,
}

impl<S: Scalar> OpNode<S> for SumAxisOp {
    fn backward(&self, g: &[S], _out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let (outer, len, inner) = split_axis(ctx.vals[self.x].shape(), self.axis).expect("checked");
        let gx = ctx.grad_buf(self.x);
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let gb = o * inner;
                for i in 0..inner {
                    gx[base + i] += g[gb + i];
                }
            }
        }
    }
}

struct SoftmaxOp {
    x: TensorId,
    axis: usize,
}

impl<S: Scalar> OpNode<S> for SoftmaxOp {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let (outer, len, inner) = split_axis(out.shape(), self.axis).expect("checked");
        let yd = out.data();
        let gx = ctx.grad_buf(self.x);
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut dot = S::zero();
                for l in 0..len {
                    dot = g[at(l)].mul_add(yd[at(l)], dot);
                }
                for l in 0..len {
                    gx[at(l)] += yd[at(l)] * (g[at(l)] - dot);
                }
            }
        }
    }
}

struct LogSumExpOp {
    x: TensorId,
    axis: usize,
}

impl<S: Scalar> OpNode<S> for LogSumExpOp {
    fn backward(&self, g: &[S], out: &Tensor<S>, ctx: &mut Ctx<'_, S>) {
        if !ctx.needs(self.x) {
            return;
        }
        let vals = ctx.vals;
        let (outer, len, inner) = split_axis(vals[self.x].shape(), self.axis).expect("checked");
        let xd = vals[self.x].data();
        let od = out.data();
        let gx = ctx.grad_buf(self.x);
        for o in 0..outer {
            for i in 0..inner {
                let lane = od[o * inner + i];
                let gl = g[o * inner + i];
                for l in 0..len {
                    let idx = (o * len + l) * inner + i;
                    gx[idx] += gl * (xd[idx] - lane).exp();
                }
            }
        }
    }
}

/// numpy-style right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::InvalidArgument(format!(
                "cannot broadcast shapes {a:?} and {b:?}"
            )));
        };
    }
    Ok(out)
}

/// Walk the output index space calling `f(out_idx, a_idx, b_idx)` with the
/// broadcast-resolved flat offsets into each operand.
fn for_each_bcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let stride_of = |shape: &[usize]| -> Vec<usize> {
        // Right-aligned; zero stride where the dim is broadcast.
        let mut s = vec![0usize; rank];
        let offset = rank - shape.len();
        let mut acc = 1;
        for i in (0..shape.len()).rev() {
            s[offset + i] = if shape[i] == 1 { 0 } else { acc };
            acc *= shape[i];
        }
        s
    };
    let sa = stride_of(a);
    let sb = stride_of(b);
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for oi in 0..numel {
        f(oi, ai, bi);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
            ai -= sa[d] * out[d];
            bi -= sb[d] * out[d];
        }
    }
}

/// Split a shape at `axis` into (product before, axis length, product after).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}
