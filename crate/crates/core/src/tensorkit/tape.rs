use std::sync::atomic::{AtomicBool, Ordering};

use super::conv::{col2im, im2col, ConvGeom};
use super::element::{gemm, Layout};
use super::tensor::axis_extents;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_8;
const GELU_A: f64 = 0.044_715;

static GELU_GRAD_FAULT: AtomicBool = AtomicBool::new(false);

/// Corrupt the GELU derivative on purpose. Only the gradient-check harness
/// uses this, to prove that it notices a broken backward pass.
pub fn set_gelu_grad_fault(enabled: bool) {
    GELU_GRAD_FAULT.store(enabled, Ordering::SeqCst);
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddTrailing(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    PrependToken {
        x: Var,
        token: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert list of executed operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the list is topologically sorted
/// by construction. A tape supports exactly one [`Tape::backward`] call.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    /// Gradient of the last backward pass w.r.t. a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!("add: {sa:?} vs {sb:?}")));
        }
        let shape = sa.to_vec();
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s (bias rows, positional tables).
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::Dimension(format!(
                "add_trailing: {sy:?} is not a suffix of {sx:?}"
            )));
        }
        let shape = sx.to_vec();
        let yd = self.data(y);
        let period = yd.len();
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + yd[i % period])
            .collect();
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddTrailing(x, y), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!("mul: {sa:?} vs {sb:?}")));
        }
        let shape = sa.to_vec();
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: f64 = d.iter().map(|v| v.f64()).sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::of(s)), Op::Mean(x), rg)
    }

    /// Matrix product over the last two axes.
    ///
    /// Either both operands share identical leading (batch) axes, or `b` is a
    /// plain matrix applied to every row of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Dimension(format!(
                "matmul needs rank >= 2, got {sa:?} and {sb:?}"
            )));
        }
        let k = sa[sa.len() - 1];
        let kb = sb[sb.len() - 2];
        let n = sb[sb.len() - 1];
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {sa:?} x {sb:?}"
            )));
        }
        let (batch, m, shared_rhs) = if sb.len() == 2 {
            (1, sa[..sa.len() - 1].iter().product::<usize>(), true)
        } else if sa.len() == sb.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            (sa[..sa.len() - 2].iter().product::<usize>(), sa[sa.len() - 2], false)
        } else {
            return Err(Error::Dimension(format!("matmul batch axes differ: {sa:?} x {sb:?}")));
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[bi * m * k..],
                Layout::row_major(k),
                &bd[bi * k * n..],
                Layout::row_major(n),
                T::zero(),
                &mut out[bi * m * n..],
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    /// 2-D cross-correlation with symmetric zero padding, plus a per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if self.shape(b) != [geom.c_out] {
            return Err(Error::Dimension(format!(
                "conv2d bias must be [{}], got {:?}",
                geom.c_out,
                self.shape(b)
            )));
        }
        let cols = im2col(self.data(x), &geom);
        let l = geom.spatial_out();
        let nl = geom.n * l;
        let mut tmp = vec![T::zero(); geom.c_out * nl];
        gemm(
            geom.c_out,
            geom.patch_len(),
            nl,
            self.data(w),
            Layout::row_major(geom.patch_len()),
            &cols,
            Layout::row_major(nl),
            T::zero(),
            &mut tmp,
        );
        let bias = self.data(b);
        let mut out = vec![T::zero(); nl * geom.c_out];
        for n in 0..geom.n {
            for o in 0..geom.c_out {
                let dst = &mut out[(n * geom.c_out + o) * l..][..l];
                let src = &tmp[o * nl + n * l..][..l];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::from_parts(geom.out_shape().to_vec(), out);
        // Patches are only needed again for the weight gradient.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Argument(format!("softmax axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        let mut buf = vec![0.0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| src[base + j * inner].f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (j, e) in buf.iter_mut().enumerate() {
                    *e = (src[base + j * inner].f64() - max).exp();
                    total += *e;
                }
                for (j, e) in buf.iter().enumerate() {
                    out[base + j * inner] = T::of(e / total);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg))
    }

    /// Normalize over the last axis, then apply `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Dimension("layernorm on a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension(format!(
                "layernorm affine parameters must be [{d}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (src, g, bt) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![0.0f64; rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..][..d];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j].f64() - mean) * is;
                xhat[r * d + j] = T::of(xh);
                out[r * d + j] = T::of(xh * g[j].f64() + bt[j].f64());
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            let v = v.f64();
            T::of(0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
        });
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [n, c] = shape[..] else {
            return Err(Error::Dimension(format!("cross_entropy expects [N, C], got {shape:?}")));
        };
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0f64; n * c];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * c..][..c];
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j].f64() - lse).exp();
            }
            total += lse - row[label].f64();
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(T::of(total / n as f64)), op, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Argument(format!(
                "{axes:?} is not a permutation of rank {}",
                shape.len()
            )));
        }
        let (out_shape, out) = permute_data(self.data(x), &shape, axes);
        let rg = self.rg(x);
        let op = Op::Permute { x, axes: axes.to_vec() };
        Ok(self.push(Tensor::from_parts(out_shape, out), op, rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Argument(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Narrow { x, axis, start }, rg))
    }

    /// `[N, T, D]` tokens with a shared `[D]` token prepended to every sequence.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, t, d] = shape[..] else {
            return Err(Error::Dimension(format!(
                "prepend_token expects [N, T, D], got {shape:?}"
            )));
        };
        if self.shape(token) != [d] {
            return Err(Error::Dimension(format!(
                "token must be [{d}], got {:?}",
                self.shape(token)
            )));
        }
        let (src, tok) = (self.data(x), self.data(token));
        let mut out = Vec::with_capacity(n * (t + 1) * d);
        for i in 0..n {
            out.extend_from_slice(tok);
            out.extend_from_slice(&src[i * t * d..][..t * d]);
        }
        let rg = self.rg(x) || self.rg(token);
        Ok(self.push(
            Tensor::from_parts(vec![n, t + 1, d], out),
            Op::PrependToken { x, token },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`; fills gradients of every
    /// differentiable leaf it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; record the forward pass again".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Contract(
                "loss does not depend on any differentiable leaf".into(),
            ));
        }
        self.backward_done = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = Vec::new();
        leaf_grads.resize_with(nodes.len(), || None);

        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::AddTrailing(x, y) => {
                    if needs(*y) {
                        let period = nodes[y.0].value.numel();
                        let mut acc = vec![0.0f64; period];
                        for (i, v) in g.iter().enumerate() {
                            acc[i % period] += v.f64();
                        }
                        accumulate(&mut grads[y.0], acc.into_iter().map(T::of).collect());
                    }
                    if needs(*x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let d = g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                        accumulate(&mut grads[a.0], d);
                    }
                    if needs(*b) {
                        let d = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                        accumulate(&mut grads[b.0], d);
                    }
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads[x.0], g.iter().map(|&v| v * *c).collect());
                }
                Op::Sum(x) => {
                    let n = nodes[x.0].value.numel();
                    accumulate(&mut grads[x.0], vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.numel();
                    accumulate(&mut grads[x.0], vec![T::of(g[0].f64() / n as f64); n]);
                }
                &Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    shared_rhs,
                } => {
                    let (ad, bd) = (val(a), val(b));
                    if needs(a) {
                        let mut da = vec![T::zero(); batch * m * k];
                        for bi in 0..batch {
                            let boff = if shared_rhs { 0 } else { bi * k * n };
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..],
                                Layout::row_major(n),
                                &bd[boff..],
                                Layout::transposed(n),
                                T::zero(),
                                &mut da[bi * m * k..],
                            );
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                    if needs(b) {
                        let mut db = vec![T::zero(); if shared_rhs { k * n } else { batch * k * n }];
                        for bi in 0..batch {
                            let (boff, beta) = if shared_rhs {
                                (0, if bi == 0 { T::zero() } else { T::one() })
                            } else {
                                (bi * k * n, T::zero())
                            };
                            gemm(
                                k,
                                m,
                                n,
                                &ad[bi * m * k..],
                                Layout::transposed(k),
                                &g[bi * m * n..],
                                Layout::row_major(n),
                                beta,
                                &mut db[boff..],
                            );
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let l = geom.spatial_out();
                    let nl = geom.n * l;
                    // Gather the output gradient into [c_out, n*l] to match the patch matrix.
                    let mut gt = vec![T::zero(); geom.c_out * nl];
                    for n in 0..geom.n {
                        for o in 0..geom.c_out {
                            gt[o * nl + n * l..][..l].copy_from_slice(&g[(n * geom.c_out + o) * l..][..l]);
                        }
                    }
                    if needs(*b) {
                        let db = (0..geom.c_out)
                            .map(|o| T::of(gt[o * nl..][..nl].iter().map(|v| v.f64()).sum()))
                            .collect();
                        accumulate(&mut grads[b.0], db);
                    }
                    if needs(*w) {
                        let pl = geom.patch_len();
                        let mut dw = vec![T::zero(); geom.c_out * pl];
                        gemm(
                            geom.c_out,
                            nl,
                            pl,
                            &gt,
                            Layout::row_major(nl),
                            cols,
                            Layout::transposed(nl),
                            T::zero(),
                            &mut dw,
                        );
                        accumulate(&mut grads[w.0], dw);
                    }
                    if needs(*x) {
                        let pl = geom.patch_len();
                        let mut dcols = vec![T::zero(); pl * nl];
                        gemm(
                            pl,
                            geom.c_out,
                            nl,
                            val(*w),
                            Layout::transposed(pl),
                            &gt,
                            Layout::row_major(nl),
                            T::zero(),
                            &mut dcols,
                        );
                        accumulate(&mut grads[x.0], col2im(&dcols, geom));
                    }
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len)
                                .map(|j| g[base + j * inner].f64() * y[base + j * inner].f64())
                                .sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                dx[p] = T::of(y[p].f64() * (g[p].f64() - dot));
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = nodes[gamma.0].value.numel();
                    let gm = val(*gamma);
                    let rows = g.len() / d;
                    if needs(*gamma) || needs(*beta) {
                        let mut dg = vec![0.0f64; d];
                        let mut dbt = vec![0.0f64; d];
                        for r in 0..rows {
                            for j in 0..d {
                                let gv = g[r * d + j].f64();
                                dg[j] += gv * xhat[r * d + j].f64();
                                dbt[j] += gv;
                            }
                        }
                        if needs(*gamma) {
                            accumulate(&mut grads[gamma.0], dg.into_iter().map(T::of).collect());
                        }
                        if needs(*beta) {
                            accumulate(&mut grads[beta.0], dbt.into_iter().map(T::of).collect());
                        }
                    }
                    if needs(*x) {
                        let mut dx = vec![T::zero(); g.len()];
                        let mut dxh = vec![0.0f64; d];
                        for r in 0..rows {
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for j in 0..d {
                                let v = g[r * d + j].f64() * gm[j].f64();
                                dxh[j] = v;
                                s1 += v;
                                s2 += v * xhat[r * d + j].f64();
                            }
                            let inv_d = 1.0 / d as f64;
                            for j in 0..d {
                                let xh = xhat[r * d + j].f64();
                                dx[r * d + j] = T::of(inv_std[r] * (dxh[j] - s1 * inv_d - xh * s2 * inv_d));
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Gelu(x) => {
                    let fault = GELU_GRAD_FAULT.load(Ordering::Relaxed);
                    let dx = g
                        .iter()
                        .zip(val(*x))
                        .map(|(&g, &v)| {
                            let v = v.f64();
                            let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                            let mut d = 0.5 * (1.0 + th);
                            if !fault {
                                d += 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            }
                            T::of(g.f64() * d)
                        })
                        .collect();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = g[0].f64() / n as f64;
                    let mut dx = vec![T::zero(); probs.len()];
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dx[r * c + j] = T::of(scale * (probs[r * c + j] - onehot));
                        }
                    }
                    accumulate(&mut grads[logits.0], dx);
                }
                Op::Reshape(x) => accumulate(&mut grads[x.0], g),
                Op::Permute { x, axes } => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let (_, dx) = permute_data(&g, node.value.shape(), &inverse);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Narrow { x, axis, start } => {
                    let in_shape = nodes[x.0].value.shape();
                    let (outer, full, inner) = axis_extents(in_shape, *axis);
                    let len = node.value.shape()[*axis];
                    let mut dx = vec![T::zero(); outer * full * inner];
                    for o in 0..outer {
                        dx[(o * full + start) * inner..][..len * inner]
                            .copy_from_slice(&g[o * len * inner..][..len * inner]);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::PrependToken { x, token } => {
                    let shape = node.value.shape();
                    let (n, t1, d) = (shape[0], shape[1], shape[2]);
                    if needs(*token) {
                        let mut acc = vec![0.0f64; d];
                        for i in 0..n {
                            for (a, v) in acc.iter_mut().zip(&g[i * t1 * d..][..d]) {
                                *a += v.f64();
                            }
                        }
                        accumulate(&mut grads[token.0], acc.into_iter().map(T::of).collect());
                    }
                    if needs(*x) {
                        let mut dx = Vec::with_capacity(n * (t1 - 1) * d);
                        for i in 0..n {
                            dx.extend_from_slice(&g[(i * t1 + 1) * d..][..(t1 - 1) * d]);
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
            }
        }
        self.grads = leaf_grads;
        Ok(())
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
        None => *slot = Some(g),
    }
}

fn permute_data<T: Element>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Stride in the source for each output axis.
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}
