use super::kernels::{self, ConvGeom, Taps};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Resize {
        x: Var,
        ty: Taps,
        tx: Taps,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumSpatial(Var),
    MaskedMean {
        x: Var,
        sample: usize,
        mask: Vec<T>,
        count: T,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Cosine {
        a: Var,
        b: Var,
        norm_a: T,
        norm_b: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-threaded reverse-mode tape. Every op appends a node; `backward`
/// walks the nodes in reverse and accumulates into leaf gradients.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are accumulated only for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[a.0].value.map(f);
        self.push(value, op, &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[a.0].value.data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::LogDomain(bad.f64()));
        }
        Ok(self.unary(a, T::ln, Op::Log(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// `[N, C, H, W] -> [N, C]` sum over the spatial axes.
    pub fn sum_spatial(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let &[n, c, h, w] = v.shape() else {
            return Err(Error::shape("sum_spatial", format!("expected 4-D, got {:?}", v.shape())));
        };
        let data = v.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::SumSpatial(a), &[a]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (&[m, k], &[k2, n]) = (va.shape(), vb.shape()) else {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            va.data(),
            (k as isize, 1),
            vb.data(),
            (n as isize, 1),
            &mut out,
            (n as isize, 1),
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Cross-correlation of `x: [N, Ci, H, W]` with `w: [Co, Ci, kh, kw]`
    /// plus optional bias `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (&[n, ci, h, wd], &[co, ci2, kh, kw]) = (vx.shape(), vw.shape()) else {
            return Err(Error::shape("conv2d", format!("x {:?}, w {:?}", vx.shape(), vw.shape())));
        };
        if ci != ci2 || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("x {:?}, w {:?}", vx.shape(), vw.shape())));
        }
        if let Some(b) = b {
            let vb = self.nodes[b.0].value.shape();
            if vb != [co] {
                return Err(Error::shape("conv2d", format!("bias {vb:?} for {co} outputs")));
            }
        }
        let geom = ConvGeom {
            ci,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * co * cols_n];
        let mut cols = vec![T::zero(); rows * cols_n];
        for (xs, os) in vx.data().chunks(ci * h * wd).zip(out.chunks_mut(co * cols_n)) {
            kernels::im2col(xs, &geom, &mut cols);
            T::gemm(
                co,
                rows,
                cols_n,
                vw.data(),
                (rows as isize, 1),
                &cols,
                (cols_n as isize, 1),
                os,
                (cols_n as isize, 1),
                false,
            );
            if let Some(b) = b {
                let bias = self.nodes[b.0].value.data();
                for (plane, &bv) in os.chunks_mut(cols_n).zip(bias) {
                    plane.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
        let value = Tensor::new(vec![n, co, geom.ho, geom.wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// Bilinear resampling of `[N, C, H, W]` to `[N, C, out_h, out_w]` with
    /// half-pixel centres.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let &[n, c, h, w] = vx.shape() else {
            return Err(Error::shape("resize_bilinear", format!("{:?}", vx.shape())));
        };
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::shape("resize_bilinear", "empty extent"));
        }
        let ty = kernels::bilinear_taps(h, out_h);
        let tx = kernels::bilinear_taps(w, out_w);
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for (src, dst) in vx.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
            kernels::resize_plane(src, w, &ty, &tx, dst);
        }
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Resize { x, ty, tx }, &[x]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("{s:?}")));
        }
        self.resize_bilinear(x, s[2] * 2, s[3] * 2)
    }

    /// 2x2 max pooling with stride 2; spatial extents must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let &[n, c, h, w] = vx.shape() else {
            return Err(Error::shape("max_pool2", format!("{:?}", vx.shape())));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("odd extent {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let data = vx.data();
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let i0 = base + 2 * oy * w + 2 * ox;
                    let mut best = i0;
                    for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Mean of `x[sample, c, :, :]` over the pixels where `mask` is nonzero,
    /// per channel. `x` is `[N, C, H, W]`; the mask is a constant `H*W` array.
    pub fn masked_mean(&mut self, x: Var, sample: usize, mask: &[T]) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let &[n, c, h, w] = vx.shape() else {
            return Err(Error::shape("masked_mean", format!("{:?}", vx.shape())));
        };
        if sample >= n || mask.len() != h * w {
            return Err(Error::shape(
                "masked_mean",
                format!("sample {sample} of {n}, mask {} for {h}x{w}", mask.len()),
            ));
        }
        let count: T = mask.iter().copied().sum();
        if count <= T::zero() {
            return Err(Error::EmptyMask("masked_mean"));
        }
        let start = sample * c * h * w;
        let data = vx.data()[start..start + c * h * w]
            .chunks(h * w)
            .map(|plane| plane.iter().zip(mask).map(|(&v, &m)| v * m).sum::<T>() / count)
            .collect();
        let value = Tensor::new(vec![c], data)?;
        let op = Op::MaskedMean {
            x,
            sample,
            mask: mask.to_vec(),
            count,
        };
        Ok(self.push(value, op, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?.0)
            .map(|n| n.value.shape().to_vec())
            .unwrap_or_default();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.push(value, op, parts))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let shape = vx.shape();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return Err(Error::shape("narrow", format!("{start}+{len} of {shape:?}")));
        }
        let row: usize = shape[1..].iter().product();
        let data = vx.data()[start * row..(start + len) * row].to_vec();
        let mut new_shape = shape.to_vec();
        new_shape[0] = len;
        let value = Tensor::new(new_shape, data)?;
        Ok(self.push(value, Op::Narrow { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Cosine similarity of two equal-length vectors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 1 {
            return Err(Error::shape("cosine_similarity", format!("{:?}", va.shape())));
        }
        same_shape("cosine_similarity", va.shape(), vb.shape())?;
        let norm_a = va.sq_norm().sqrt();
        let norm_b = vb.sq_norm().sqrt();
        if norm_a <= T::zero() || norm_b <= T::zero() {
            return Err(Error::ZeroNorm("cosine_similarity"));
        }
        let dot: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).sum();
        let value = Tensor::scalar(dot / (norm_a * norm_b));
        Ok(self.push(value, Op::Cosine { a, b, norm_a, norm_b }, &[a, b]))
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if self.leaf_grads.len() <= i {
                    self.leaf_grads.resize_with(i + 1, || None);
                }
                let slot = self.leaf_grads[i].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
                for (s, &v) in slot.data_mut().iter_mut().zip(&g) {
                    *s = *s + v;
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if !self.needs(v) {
            return;
        }
        let slot = grad_slot(grads, v, self.numel(v));
        for (k, s) in slot.iter_mut().enumerate() {
            *s = *s + f(k);
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |k| g[k]);
                self.accumulate(grads, *b, |k| g[k]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |k| g[k]);
                self.accumulate(grads, *b, |k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |k| g[k] * db[k]);
                self.accumulate(grads, *b, |k| g[k] * da[k]);
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |k| g[k] / db[k]);
                self.accumulate(grads, *b, |k| -g[k] * da[k] / (db[k] * db[k]));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |k| g[k] * *s),
            Op::AddScalar(a) => self.accumulate(grads, *a, |k| g[k]),
            Op::Relu(a) => {
                let da = self.data(*a);
                self.accumulate(grads, *a, |k| if da[k] > T::zero() { g[k] } else { T::zero() });
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |k| g[k] * out[k] * (T::one() - out[k])),
            Op::Exp(a) => self.accumulate(grads, *a, |k| g[k] * out[k]),
            Op::Log(a) => {
                let da = self.data(*a);
                self.accumulate(grads, *a, |k| g[k] / da[k]);
            }
            Op::Sum(a) => self.accumulate(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = T::of(self.numel(*a) as f64);
                self.accumulate(grads, *a, |_| g[0] / n);
            }
            Op::SumSpatial(a) => {
                let s = self.nodes[a.0].value.shape();
                let hw = s[2] * s[3];
                self.accumulate(grads, *a, |k| g[k / hw]);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let db = self.data(*b);
                    let slot = grad_slot(grads, *a, m * k);
                    T::gemm(m, n, k, g, (n as isize, 1), db, (1, n as isize), slot, (k as isize, 1), true);
                }
                if self.needs(*b) {
                    let da = self.data(*a);
                    let slot = grad_slot(grads, *b, k * n);
                    T::gemm(k, m, n, da, (1, k as isize), g, (n as isize, 1), slot, (n as isize, 1), true);
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, g, grads),
            Op::Resize { x, ty, tx } => {
                if self.needs(*x) {
                    let s = self.nodes[x.0].value.shape();
                    let (h, w) = (s[2], s[3]);
                    let n_in = self.numel(*x);
                    let plane_out = ty.lo.len() * tx.lo.len();
                    let slot = grad_slot(grads, *x, n_in);
                    for (go, gi) in g.chunks(plane_out).zip(slot.chunks_mut(h * w)) {
                        kernels::resize_plane_adjoint(go, w, ty, tx, gi);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let slot = grad_slot(grads, *x, self.numel(*x));
                    for (&src, &gv) in argmax.iter().zip(g) {
                        slot[src] = slot[src] + gv;
                    }
                }
            }
            Op::MaskedMean {
                x,
                sample,
                mask,
                count,
            } => {
                if self.needs(*x) {
                    let s = self.nodes[x.0].value.shape();
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let slot = grad_slot(grads, *x, self.numel(*x));
                    let start = sample * c * hw;
                    for (ch, plane) in slot[start..start + c * hw].chunks_mut(hw).enumerate() {
                        let gc = g[ch] / *count;
                        for (p, &m) in plane.iter_mut().zip(mask) {
                            *p = *p + gc * m;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.nodes[p.0].value.shape()[*axis] * inner;
                    if self.needs(*p) {
                        let slot = grad_slot(grads, *p, self.numel(*p));
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (d, &v) in slot[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, start } => {
                if self.needs(*x) {
                    let row: usize = node.value.shape()[1..].iter().product();
                    let slot = grad_slot(grads, *x, self.numel(*x));
                    for (d, &v) in slot[start * row..start * row + g.len()].iter_mut().zip(g) {
                        *d = *d + v;
                    }
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |k| g[k]),
            Op::Cosine { a, b, norm_a, norm_b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let c = out[0];
                let ab = *norm_a * *norm_b;
                let (aa, bb) = (*norm_a * *norm_a, *norm_b * *norm_b);
                self.accumulate(grads, *a, |k| g[0] * (db[k] / ab - c * da[k] / aa));
                self.accumulate(grads, *b, |k| g[0] * (da[k] / ab - c * db[k] / bb));
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let co = self.nodes[w.0].value.shape()[0];
        let in_len = geom.ci * geom.h * geom.w;
        let xd = self.data(x);
        let wd = self.data(w);
        let n = xd.len() / in_len;

        if let Some(b) = b.filter(|b| self.needs(*b)) {
            let slot = grad_slot(grads, b, co);
            for gs in g.chunks(co * cols_n) {
                for (s, plane) in slot.iter_mut().zip(gs.chunks(cols_n)) {
                    *s = *s + plane.iter().copied().sum();
                }
            }
        }
        let mut cols = vec![T::zero(); rows * cols_n];
        if self.needs(w) {
            let mut dw = vec![T::zero(); co * rows];
            for s in 0..n {
                kernels::im2col(&xd[s * in_len..(s + 1) * in_len], geom, &mut cols);
                let gs = &g[s * co * cols_n..(s + 1) * co * cols_n];
                T::gemm(
                    co,
                    cols_n,
                    rows,
                    gs,
                    (cols_n as isize, 1),
                    &cols,
                    (1, cols_n as isize),
                    &mut dw,
                    (rows as isize, 1),
                    true,
                );
            }
            let slot = grad_slot(grads, w, co * rows);
            for (d, v) in slot.iter_mut().zip(dw) {
                *d = *d + v;
            }
        }
        if self.needs(x) {
            let slot = grad_slot(grads, x, n * in_len);
            for s in 0..n {
                let gs = &g[s * co * cols_n..(s + 1) * co * cols_n];
                T::gemm(
                    rows,
                    co,
                    cols_n,
                    wd,
                    (1, rows as isize),
                    gs,
                    (cols_n as isize, 1),
                    &mut cols,
                    (cols_n as isize, 1),
                    false,
                );
                kernels::col2im(&cols, geom, &mut slot[s * in_len..(s + 1) * in_len]);
            }
        }
    }
}
