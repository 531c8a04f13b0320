//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already topologically sorted and `backward` is a single reverse sweep.
//! The primitive set is deliberately small: fully connected layers, 2-D
//! convolution (im2col + matrix product), ReLU, 2x2 max pooling, global
//! average pooling and fused softmax cross-entropy, plus the few elementwise
//! helpers needed to mask weights and combine losses.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Select { x: Var, keep: Vec<bool> },
    Add { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Sum { a: Var },
    Reshape { a: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Select { .. } => "select",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    name: Option<String>,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Non-finite checks follow `debug_assertions`.
    pub fn new() -> Self {
        Self::with_checks(cfg!(debug_assertions))
    }

    pub fn with_checks(check_finite: bool) -> Self {
        Self {
            nodes: Vec::new(),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false, None)
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(t, requires_grad, None)
    }

    /// Named leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(t, requires_grad, Some(name.to_owned()))
    }

    fn push_leaf(&mut self, t: Tensor<T>, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Result<Var> {
        let idx = self.nodes.len();
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                op: format!("{} (node {idx})", op.name()),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            name: None,
        });
        Ok(Var(idx))
    }

    fn shape_err(&self, op: &str, detail: String) -> Error {
        Error::shape(format!("{op} (node {})", self.nodes.len()), detail)
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        self.push(Op::MatMul { a, b, m, k, n }, value, &[a, b])
    }

    /// Fully connected layer: `x (n×in) · wᵀ + b`, with `w` of shape (out, in).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(self.shape_err("linear", format!("input {sx:?}, weight {sw:?}")));
        }
        let (n, fin, fout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(self.shape_err(
                    "linear",
                    format!("bias {:?}, expected [{fout}]", self.shape(b)),
                ));
            }
        }
        let mut out = vec![T::zero(); n * fout];
        kernels::gemm_nt(n, fin, fout, self.value(x).data(), self.value(w).data(), &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, fout], out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Op::Linear { x, w, b }, value, &inputs)
    }

    /// 2-D convolution of `x (N,C,H,W)` with `w (O,C,KH,KW)`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(self.shape_err(
                "conv2d",
                format!("input {sx:?}, weight {sw:?}, stride {stride}"),
            ));
        }
        let (hp, wp) = (sx[2] + 2 * pad, sx[3] + 2 * pad);
        if hp < sw[2] || wp < sw[3] {
            return Err(self.shape_err(
                "conv2d",
                format!("kernel {sw:?} larger than padded input {sx:?}"),
            ));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            out_h: (hp - sw[2]) / stride + 1,
            out_w: (wp - sw[3]) / stride + 1,
        };
        if let Some(b) = b {
            if self.shape(b) != [geom.out_ch] {
                return Err(self.shape_err(
                    "conv2d",
                    format!("bias {:?}, expected [{}]", self.shape(b), geom.out_ch),
                ));
            }
        }
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let xin = self.value(x).data();
        let mut cols = vec![T::zero(); geom.batch * pl * ol];
        let in_len = geom.in_ch * geom.height * geom.width;
        for n in 0..geom.batch {
            kernels::im2col(
                &geom,
                &xin[n * in_len..(n + 1) * in_len],
                &mut cols[n * pl * ol..(n + 1) * pl * ol],
            );
        }
        let wdata = self.value(w).data();
        let mut out = vec![T::zero(); geom.batch * geom.out_ch * ol];
        for n in 0..geom.batch {
            let dst = &mut out[n * geom.out_ch * ol..(n + 1) * geom.out_ch * ol];
            kernels::gemm_nn(
                geom.out_ch,
                pl,
                ol,
                wdata,
                &cols[n * pl * ol..(n + 1) * pl * ol],
                dst,
            );
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (o, plane) in dst.chunks_mut(ol).enumerate() {
                    for v in plane {
                        *v += bias[o];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w], out);
        let keep_cols = self.nodes[w.0].requires_grad;
        let op = Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols: if keep_cols { cols } else { Vec::new() },
        };
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(op, value, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu { x }, value, &[x])
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Ties go to the first position in row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(self.shape_err("max_pool2", format!("input {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xin = self.value(x).data();
        let mut out = Vec::with_capacity(nc * oh * ow);
        let mut argmax = Vec::with_capacity(nc * oh * ow);
        for plane in 0..nc {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xin[idx] > xin[best] {
                            best = idx;
                        }
                    }
                    out.push(xin[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        self.push(Op::MaxPool2 { x, argmax }, value, &[x])
    }

    /// Mean over the spatial axes: (N,C,H,W) -> (N,C).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(self.shape_err("global_avg_pool", format!("input {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::from_usize(hw).expect("usize");
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_parts(vec![s[0], s[1]], out);
        self.push(Op::GlobalAvgPool { x }, value, &[x])
    }

    /// Mean softmax cross-entropy of `logits (N,K)` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(self.shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(self.shape_err(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); z.len()];
        let mut total = T::zero();
        for (n, &y) in labels.iter().enumerate() {
            let row = &z[n * k..(n + 1) * k];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut denom = T::zero();
            for (p, &v) in probs[n * k..(n + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp();
                denom += *p;
            }
            for p in &mut probs[n * k..(n + 1) * k] {
                *p = *p / denom;
            }
            total += m + denom.ln() - row[y];
        }
        let loss = total / T::from_usize(labels.len().max(1)).expect("usize");
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(op, Tensor::scalar(loss), &[logits])
    }

    /// Keeps entries where `keep` is true and writes exact zeros elsewhere.
    pub fn select(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(self.shape_err(
                "select",
                format!("{} flags for {} elements", keep.len(), self.value(x).numel()),
            ));
        }
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { T::zero() })
            .collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        self.push(Op::Select { x, keep: keep.to_vec() }, value, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(Op::Add { a, b }, value, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        self.push(Op::Scale { a, factor }, value, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: T = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum { a }, Tensor::scalar(total), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(self.shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.value(a).data().to_vec());
        self.push(Op::Reshape { a }, value, &[a])
    }

    /// Gradients of the scalar `loss` with respect to every leaf created with
    /// `requires_grad`. Leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Gradients {
            by_var: BTreeMap::new(),
            names: BTreeMap::new(),
        };
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let shape = node.value.shape().to_vec();
                let data = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.by_var.insert(Var(idx), Tensor::from_parts(shape, data));
                if let Some(name) = &node.name {
                    out.names.insert(name.clone(), Var(idx));
                }
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    let da = accum(grads, *a, m * k);
                    kernels::gemm_nt(*m, *n, *k, g, self.value(*b).data(), da);
                }
                if self.wants(*b) {
                    let db = accum(grads, *b, k * n);
                    kernels::gemm_tn(*k, *m, *n, self.value(*a).data(), g, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, fin, fout) = (sx[0], sx[1], sw[0]);
                if self.wants(*x) {
                    let dx = accum(grads, *x, n * fin);
                    kernels::gemm_nn(n, fout, fin, g, self.value(*w).data(), dx);
                }
                if self.wants(*w) {
                    let dw = accum(grads, *w, fout * fin);
                    kernels::gemm_tn(fout, n, fin, g, self.value(*x).data(), dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = accum(grads, *b, fout);
                        for row in g.chunks(fout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let oc = geom.out_ch;
                if self.wants(*w) {
                    let dw = accum(grads, *w, oc * pl);
                    for n in 0..geom.batch {
                        kernels::gemm_nt(
                            oc,
                            ol,
                            pl,
                            &g[n * oc * ol..(n + 1) * oc * ol],
                            &cols[n * pl * ol..(n + 1) * pl * ol],
                            dw,
                        );
                    }
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = accum(grads, *b, oc);
                        for n in 0..geom.batch {
                            for (o, d) in db.iter_mut().enumerate() {
                                let base = (n * oc + o) * ol;
                                *d += g[base..base + ol].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    let in_len = geom.in_ch * geom.height * geom.width;
                    let wdata = self.value(*w).data();
                    let mut dcols = vec![T::zero(); pl * ol];
                    let dx = accum(grads, *x, geom.batch * in_len);
                    for n in 0..geom.batch {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        kernels::gemm_tn(pl, oc, ol, wdata, &g[n * oc * ol..(n + 1) * oc * ol], &mut dcols);
                        kernels::col2im(geom, &dcols, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xin = self.value(*x).data();
                    let dx = accum(grads, *x, xin.len());
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xin) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.wants(*x) {
                    let dx = accum(grads, *x, self.value(*x).numel());
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let hw = s[2] * s[3];
                    let inv = T::one() / T::from_usize(hw).expect("usize");
                    let dx = accum(grads, *x, s.iter().product());
                    for (plane, &gv) in dx.chunks_mut(hw).zip(g) {
                        let share = gv * inv;
                        for d in plane {
                            *d += share;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.wants(*logits) {
                    let k = self.shape(*logits)[1];
                    let scale = g[0] / T::from_usize(labels.len().max(1)).expect("usize");
                    let dz = accum(grads, *logits, probs.len());
                    for (n, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            dz[n * k + j] += scale * (probs[n * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Select { x, keep } => {
                if self.wants(*x) {
                    let dx = accum(grads, *x, keep.len());
                    for ((d, &gv), &k) in dx.iter_mut().zip(g).zip(keep) {
                        if k {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        let d = accum(grads, *v, g.len());
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if self.wants(*a) {
                    let d = accum(grads, *a, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv * *factor;
                    }
                }
            }
            Op::Sum { a } => {
                if self.wants(*a) {
                    let d = accum(grads, *a, self.value(*a).numel());
                    for dv in d {
                        *dv += g[0];
                    }
                }
            }
            Op::Reshape { a } => {
                if self.wants(*a) {
                    let d = accum(grads, *a, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
        }
    }
}

fn accum<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Gradients of one backward pass, keyed by leaf and by parameter name.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real = f32> {
    by_var: BTreeMap<Var, Tensor<T>>,
    names: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&v)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|v| self.by_var.get(v))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.by_var.remove(&v)
    }

    /// Named gradients in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .filter_map(|(n, v)| self.by_var.get(v).map(|t| (n.as_str(), t)))
    }

    pub fn into_named(mut self) -> BTreeMap<String, Tensor<T>> {
        let names = std::mem::take(&mut self.names);
        names
            .into_iter()
            .filter_map(|(n, v)| self.by_var.remove(&v).map(|t| (n, t)))
            .collect()
    }
}

mod kernels {
    use super::ConvGeom;
    use crate::tensor::Real;

    /// `c (m×n) += a (m×k) · b (k×n)`. Zero entries of `a` are skipped, which
    /// makes masked weights free.
    pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// `c (m×n) += a (m×k) · bᵀ` with `b` stored as (n×k).
    pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                c[i * n + j] += acc;
            }
        }
    }

    /// `c (m×n) += aᵀ · b` with `a` stored as (k×m) and `b` as (k×n).
    pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let av = a[p * m + i];
                if av == T::zero() {
                    continue;
                }
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// Patch matrix of one sample: rows are (c, ki, kj), columns output positions.
    pub fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
        let ol = g.out_h * g.out_w;
        for c in 0..g.in_ch {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[row * ol..(row + 1) * ol];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            dst[oh * g.out_w + ow] = if ih >= 0
                                && iw >= 0
                                && (ih as usize) < g.height
                                && (iw as usize) < g.width
                            {
                                x[(c * g.height + ih as usize) * g.width + iw as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add of a patch-matrix gradient back onto the input layout.
    pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
        let ol = g.out_h * g.out_w;
        for c in 0..g.in_ch {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let src = &cols[row * ol..(row + 1) * ol];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih as usize >= g.height {
                            continue;
                        }
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw as usize >= g.width {
                                continue;
                            }
                            dx[(c * g.height + ih as usize) * g.width + iw as usize] +=
                                src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}
