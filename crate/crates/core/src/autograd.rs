//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every forward op appends a node holding its output value. `backward`
//! walks the tape in reverse and accumulates gradients only into nodes that
//! transitively depend on a trainable leaf, so frozen sub-graphs (the
//! perceptual extractor, ground-truth features) cost nothing on the way back.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{col2im, gemm, im2col, ConvGeom, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Add(Var, Var),
    MulScalar {
        x: Var,
        s: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    ChannelScale {
        x: Var,
        v: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    Concat(Vec<Var>),
    AvgPool2(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SoftmaxRows(Var),
    SmoothL1 {
        pred: Var,
        target: Var,
    },
    SquaredDistance {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Parameter name to tape variable, produced by [`Tape::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Bind names to variables that are already on a tape.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of each bound parameter; zeros where the loss does not
    /// depend on a parameter.
    pub fn for_params(&self, tape: &Tape<T>, bound: &Bound) -> BTreeMap<String, Tensor<T>> {
        bound
            .iter()
            .map(|(name, v)| {
                let g = self
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

fn shape_err<S: Into<String>>(msg: S) -> Error {
    Error::Shape(msg.into())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Put every tensor of `store` on the tape, as trainable leaves or as
    /// constants.
    pub fn bind(&mut self, store: &ParamStore<T>, trainable: bool) -> Bound {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    self.leaf(t.clone())
                } else {
                    self.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (co, wci, k, k2) = self.value(w).dims4()?;
        if wci != ci || k != k2 {
            return Err(shape_err(format!(
                "conv2d weight {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).numel() != co {
                return Err(shape_err("conv2d bias length must equal output channels"));
            }
        }
        let g = ConvGeom::new(ci, h, wd, k, stride, pad)?;
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let mut out = vec![T::zero(); n * co * cols];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * cols]
        };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..n {
                let xb = &xv[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                let src: &[T] = if g.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &g, &mut col);
                    &col
                };
                let yb = &mut out[bi * co * cols..(bi + 1) * co * cols];
                gemm(co, rows, cols, T::one(), wv, false, src, false, T::zero(), yb);
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, self.value(b).data(), n, co, cols);
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::new(&[n, co, g.ho, g.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Transposed convolution; the weight is laid out `(C_in, C_out, k, k)`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, ci, hi, wi) = self.value(x).dims4()?;
        let (wci, co, k, k2) = self.value(w).dims4()?;
        if wci != ci || k != k2 {
            return Err(shape_err(format!(
                "conv_transpose2d weight {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if (hi - 1) * stride + k < 2 * pad || (wi - 1) * stride + k < 2 * pad {
            return Err(shape_err("transposed conv output would be empty"));
        }
        let ho = (hi - 1) * stride + k - 2 * pad;
        let wo = (wi - 1) * stride + k - 2 * pad;
        let g = ConvGeom::new(co, ho, wo, k, stride, pad)?;
        debug_assert_eq!((g.ho, g.wo), (hi, wi));
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let mut out = vec![T::zero(); n * co * ho * wo];
        let mut col = vec![T::zero(); rows * cols];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..n {
                let xb = &xv[bi * ci * cols..(bi + 1) * ci * cols];
                gemm(rows, ci, cols, T::one(), wv, true, xb, false, T::zero(), &mut col);
                col2im(&col, &g, &mut out[bi * co * ho * wo..(bi + 1) * co * ho * wo]);
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, self.value(b).data(), n, co, ho * wo);
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::new(&[n, co, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!(
                "add of mismatched shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut value = av.clone();
        value.add_assign(bv);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `s * x` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("mul_scalar expects a one-element scale"));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::MulScalar { x, s }, rg))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (sc, sh) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
        let value = self.value(x).map(|v| v * sc + sh);
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine { x, scale: sc }, rg)
    }

    /// `x[:, c] * v[c]` for a learnable per-channel vector `v`.
    pub fn channel_scale(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(v).numel() != c {
            return Err(shape_err(format!(
                "channel weights of length {} for {c} channels",
                self.value(v).numel()
            )));
        }
        let vv = self.value(v).data().to_vec();
        let plane = h * w;
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            let s = vv[i % c];
            chunk.iter_mut().for_each(|e| *e = *e * s);
        }
        debug_assert_eq!(value.numel(), n * c * plane);
        let rg = self.rg(&[x, v]);
        Ok(self.push(value, Op::ChannelScale { x, v }, rg))
    }

    /// `(x[:, c] - mean[c]) / std[c]` with constant statistics.
    pub fn channel_normalize(&mut self, x: Var, mean: &[f64], std: &[f64]) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        if mean.len() != c || std.len() != c {
            return Err(shape_err("normalization statistics must match channel count"));
        }
        let scale: Vec<T> = std.iter().map(|s| T::from_f64_lossy(1.0 / s)).collect();
        let shift: Vec<T> = mean
            .iter()
            .zip(std)
            .map(|(m, s)| T::from_f64_lossy(-m / s))
            .collect();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(h * w).enumerate() {
            let (a, b) = (scale[i % c], shift[i % c]);
            chunk.iter_mut().for_each(|e| *e = *e * a + b);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ChannelAffine { x, scale }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_channels(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(format!("avg_pool2 needs even spatial size, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::from_f64_lossy(0.25);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let r0 = 2 * i * w + 2 * j;
                    let s = plane[r0] + plane[r0 + 1] + plane[r0 + w] + plane[r0 + w + 1];
                    out.push(s * quarter);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AvgPool2(x), rg))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(format!("max_pool2 needs even spatial size, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let r0 = base + 2 * i * w + 2 * j;
                    let mut best = r0;
                    for idx in [r0 + 1, r0 + w, r0 + w + 1] {
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Batched product `op(a[i]) * op(b[i])` over 3-d tensors, where `op`
    /// transposes the trailing two axes when the matching flag is set.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ba, ar, ac) = self.value(a).dims3()?;
        let (bb, br, bc) = self.value(b).dims3()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if ba != bb || k != k2 {
            return Err(shape_err(format!(
                "bmm of incompatible shapes {:?} (t={ta}) and {:?} (t={tb})",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); ba * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..ba {
                gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[i * ar * ac..(i + 1) * ar * ac],
                    ta,
                    &bv[i * br * bc..(i + 1) * br * bc],
                    tb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::new(&[ba, m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Bmm { a, b, ta, tb }, rg))
    }

    /// Softmax along the last axis. The row maximum is subtracted before
    /// exponentiation; the result is mathematically the plain softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let len = *xv
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax of a 0-d tensor"))?;
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(len) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum = sum + *e;
            }
            row.iter_mut().for_each(|e| *e = *e / sum);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// `sum f(|pred - target|) / (N * H * W)` with the smooth-L1 penalty
    /// `f(e) = 0.5 e^2` below 1 and `e - 0.5` above. Channels are summed,
    /// pixels and batch averaged.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err(format!(
                "smooth-L1 of mismatched shapes {:?} and {:?}",
                p.shape(),
                t.shape()
            )));
        }
        let (n, _, h, w) = p.dims4()?;
        let half = T::from_f64_lossy(0.5);
        let total: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let e = (a - b).abs();
                if e < T::one() {
                    half * e * e
                } else {
                    e - half
                }
            })
            .sum();
        let value = Tensor::scalar(total / T::from_usize(n * h * w).unwrap());
        let rg = self.rg(&[pred, target]);
        Ok(self.push(value, Op::SmoothL1 { pred, target }, rg))
    }

    /// `sum (a - b)^2 / (N * C * H * W)`: the per-sample dimension-normalized
    /// squared distance, averaged over the batch.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!(
                "squared distance of mismatched shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let total: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / T::from_usize(av.numel()).unwrap());
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::SquaredDistance { a, b }, rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward needs a one-element loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (n, ci, h, wd) = self.value(x).dims4()?;
                let (co, _, k, _) = self.value(w).dims4()?;
                let geom = ConvGeom::new(ci, h, wd, k, stride, pad)?;
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let (need_x, need_w) = (self.requires_grad(x), self.requires_grad(w));
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let gv = g.data();
                let mut dx = need_x.then(|| vec![T::zero(); xv.len()]);
                let mut dw = need_w.then(|| vec![T::zero(); wv.len()]);
                let mut col = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * cols }];
                for bi in 0..n {
                    let gb = &gv[bi * co * cols..(bi + 1) * co * cols];
                    let sample = bi * ci * h * wd..(bi + 1) * ci * h * wd;
                    if let Some(dw) = dw.as_mut() {
                        let src: &[T] = if geom.is_pointwise() {
                            &xv[sample.clone()]
                        } else {
                            im2col(&xv[sample.clone()], &geom, &mut col);
                            &col
                        };
                        gemm(co, cols, rows, T::one(), gb, false, src, true, T::one(), dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        if geom.is_pointwise() {
                            gemm(rows, co, cols, T::one(), wv, true, gb, false, T::one(), &mut dx[sample]);
                        } else {
                            gemm(rows, co, cols, T::one(), wv, true, gb, false, T::zero(), &mut col);
                            col2im(&col, &geom, &mut dx[sample]);
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, x, Tensor::new(self.value(x).shape(), dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, Tensor::new(self.value(w).shape(), dw)?);
                }
                if let Some(b) = b {
                    let db = channel_sums(gv, n, co, cols);
                    self.accumulate(grads, b, Tensor::new(self.value(b).shape(), db)?);
                }
            }
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (n, ci, hi, wi) = self.value(x).dims4()?;
                let (_, co, ho, wo) = g.dims4()?;
                let k = self.value(w).shape()[2];
                let geom = ConvGeom::new(co, ho, wo, k, stride, pad)?;
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                debug_assert_eq!(cols, hi * wi);
                let (need_x, need_w) = (self.requires_grad(x), self.requires_grad(w));
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let gv = g.data();
                let mut dx = need_x.then(|| vec![T::zero(); xv.len()]);
                let mut dw = need_w.then(|| vec![T::zero(); wv.len()]);
                let mut col = vec![T::zero(); rows * cols];
                for bi in 0..n {
                    if !need_x && !need_w {
                        break;
                    }
                    im2col(&gv[bi * co * ho * wo..(bi + 1) * co * ho * wo], &geom, &mut col);
                    let sample = bi * ci * cols..(bi + 1) * ci * cols;
                    if let Some(dx) = dx.as_mut() {
                        gemm(ci, rows, cols, T::one(), wv, false, &col, false, T::zero(), &mut dx[sample.clone()]);
                    }
                    if let Some(dw) = dw.as_mut() {
                        gemm(ci, cols, rows, T::one(), &xv[sample], false, &col, true, T::one(), dw);
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, x, Tensor::new(self.value(x).shape(), dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, Tensor::new(self.value(w).shape(), dw)?);
                }
                if let Some(b) = b {
                    let db = channel_sums(gv, n, co, ho * wo);
                    self.accumulate(grads, b, Tensor::new(self.value(b).shape(), db)?);
                }
            }
            &Op::Relu(x) => {
                let y = node.value.data();
                let dx: Vec<T> = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, x, Tensor::new(g.shape(), dx)?);
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::MulScalar { x, s } => {
                let sv = self.value(s).item();
                if self.requires_grad(x) {
                    self.accumulate(grads, x, g.map(|v| v * sv));
                }
                if self.requires_grad(s) {
                    let ds: T = g
                        .data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    self.accumulate(grads, s, Tensor::new(self.value(s).shape(), vec![ds])?);
                }
            }
            &Op::Affine { x, scale } => {
                self.accumulate(grads, x, g.map(|v| v * scale));
            }
            &Op::ChannelScale { x, v } => {
                let (_, c, h, w) = g.dims4()?;
                let plane = h * w;
                let vv = self.value(v).data();
                if self.requires_grad(x) {
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                        let s = vv[i % c];
                        chunk.iter_mut().for_each(|e| *e = *e * s);
                    }
                    self.accumulate(grads, x, dx);
                }
                if self.requires_grad(v) {
                    let mut dv = vec![T::zero(); c];
                    for (i, (gc, xc)) in g
                        .data()
                        .chunks(plane)
                        .zip(self.value(x).data().chunks(plane))
                        .enumerate()
                    {
                        let s: T = gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                        dv[i % c] = dv[i % c] + s;
                    }
                    self.accumulate(grads, v, Tensor::new(self.value(v).shape(), dv)?);
                }
            }
            Op::ChannelAffine { x, scale } => {
                let (_, c, h, w) = g.dims4()?;
                let mut dx = g.clone();
                for (i, chunk) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    let s = scale[i % c];
                    chunk.iter_mut().for_each(|e| *e = *e * s);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.narrow_channels(start, pc)?);
                    }
                    start += pc;
                }
            }
            &Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::from_f64_lossy(0.25);
                let gv = g.data();
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let plane = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = gv[(p * ho + i) * wo + j] * quarter;
                            let r0 = 2 * i * w + 2 * j;
                            plane[r0] = v;
                            plane[r0 + 1] = v;
                            plane[r0 + w] = v;
                            plane[r0 + w + 1] = v;
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    dx[idx] = dx[idx] + gv;
                }
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            &Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, g.clone().reshape(&shape)?);
            }
            &Op::Bmm { a, b, ta, tb } => {
                let (batch, ar, ac) = self.value(a).dims3()?;
                let (_, br, bc) = self.value(b).dims3()?;
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = if tb { br } else { bc };
                let (av, bv, gv) = (self.value(a).data(), self.value(b).data(), g.data());
                if self.requires_grad(a) {
                    let mut da = vec![T::zero(); av.len()];
                    for i in 0..batch {
                        let gb = &gv[i * m * n..(i + 1) * m * n];
                        let bb = &bv[i * br * bc..(i + 1) * br * bc];
                        let out = &mut da[i * ar * ac..(i + 1) * ar * ac];
                        if ta {
                            gemm(k, n, m, T::one(), bb, tb, gb, true, T::zero(), out);
                        } else {
                            gemm(m, n, k, T::one(), gb, false, bb, !tb, T::zero(), out);
                        }
                    }
                    self.accumulate(grads, a, Tensor::new(self.value(a).shape(), da)?);
                }
                if self.requires_grad(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for i in 0..batch {
                        let gb = &gv[i * m * n..(i + 1) * m * n];
                        let ab = &av[i * ar * ac..(i + 1) * ar * ac];
                        let out = &mut db[i * br * bc..(i + 1) * br * bc];
                        if tb {
                            gemm(n, m, k, T::one(), gb, true, ab, ta, T::zero(), out);
                        } else {
                            gemm(k, m, n, T::one(), ab, !ta, gb, false, T::zero(), out);
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(self.value(b).shape(), db)?);
                }
            }
            &Op::SoftmaxRows(x) => {
                let len = *node.value.shape().last().unwrap();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(len).zip(node.value.data().chunks(len)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::SmoothL1 { pred, target } => {
                let (n, _, h, w) = self.value(pred).dims4()?;
                let scale = g.item() / T::from_usize(n * h * w).unwrap();
                let d = self
                    .value(pred)
                    .data()
                    .iter()
                    .zip(self.value(target).data())
                    .map(|(&a, &b)| (a - b).max(-T::one()).min(T::one()) * scale)
                    .collect();
                let dp = Tensor::new(self.value(pred).shape(), d)?;
                if self.requires_grad(target) {
                    self.accumulate(grads, target, dp.map(|v| -v));
                }
                self.accumulate(grads, pred, dp);
            }
            &Op::SquaredDistance { a, b } => {
                let numel = self.value(a).numel();
                let scale = g.item() * T::from_f64_lossy(2.0) / T::from_usize(numel).unwrap();
                let d = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| (x - y) * scale)
                    .collect();
                let da = Tensor::new(self.value(a).shape(), d)?;
                if self.requires_grad(b) {
                    self.accumulate(grads, b, da.map(|v| -v));
                }
                self.accumulate(grads, a, da);
            }
        }
        Ok(())
    }
}

fn add_channel_bias<T: Element>(out: &mut [T], bias: &[T], n: usize, c: usize, plane: usize) {
    for bi in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            let off = (bi * c + ch) * plane;
            out[off..off + plane].iter_mut().for_each(|e| *e = *e + bv);
        }
    }
}

fn channel_sums<T: Element>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); c];
    for bi in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            let off = (bi * c + ch) * plane;
            *s = *s + g[off..off + plane].iter().copied().sum::<T>();
        }
    }
    sums
}
