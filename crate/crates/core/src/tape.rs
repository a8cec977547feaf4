//! Reverse-mode differentiation over a linear record of tensor ops.
//!
//! Leaves are either named trainable parameters or constants. Only nodes that
//! transitively depend on a parameter carry gradients, so frozen branches cost
//! a forward pass and nothing more.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::conv::{self, ConvGeometry, Window};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Conv2d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        win: Window,
    },
    Depthwise {
        x: usize,
        k: usize,
        win: Window,
    },
    Pointwise {
        x: usize,
        k: usize,
    },
    Add(usize, usize),
    BiasAdd {
        x: usize,
        b: usize,
    },
    Relu(usize),
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
        pixels: usize,
    },
    Reshape(usize),
    /// `x · Wᵀ` for `x: (N, d)`, `W: (k, d)`.
    Linear {
        x: usize,
        w: usize,
    },
    /// `s·x + b` with scalar `s`, `b`.
    ScaleShift {
        x: usize,
        s: usize,
        b: usize,
    },
    Sum(usize),
    WeightedSum {
        x: usize,
        weights: Tensor,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug)]
pub struct GradTape {
    id: u64,
    nodes: Vec<Node>,
    names: BTreeMap<String, usize>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable is not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Records a trainable tensor. Names must be unique per tape.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::Tape(format!("parameter '{name}' recorded twice")));
        }
        let v = self.push(value, Op::Param, true);
        self.names.insert(name, v.index);
        Ok(v)
    }

    /// Records a tensor that never receives a gradient (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// `param` when `trainable`, otherwise `constant`.
    pub fn leaf(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<Var> {
        if trainable {
            self.param(name, value)
        } else {
            Ok(self.constant(value))
        }
    }

    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(k)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let ks = self.nodes[ki].value.shape().to_vec();
        if ks.len() != 4 {
            return Err(Error::shape(format!("conv kernel must be rank 4, got {ks:?}")));
        }
        let win = Window::resolve(self.nodes[xi].value.shape(), ks[0], ks[1], ks[2], geom)?;
        let y = conv::conv2d_raw(
            &self.nodes[xi].value,
            &self.nodes[ki].value,
            bi.map(|b| &self.nodes[b].value),
            geom,
        )?;
        let rg = self.needs(xi) || self.needs(ki) || bi.is_some_and(|b| self.needs(b));
        Ok(self.push(
            y,
            Op::Conv2d {
                x: xi,
                k: ki,
                bias: bi,
                win,
            },
            rg,
        ))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, geom: ConvGeometry) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(k)?);
        let ks = self.nodes[ki].value.shape().to_vec();
        if ks.len() != 3 {
            return Err(Error::shape(format!("depthwise kernel must be rank 3, got {ks:?}")));
        }
        let win = Window::resolve(self.nodes[xi].value.shape(), ks[0], ks[1], ks[2], geom)?;
        let y = conv::depthwise_raw(&self.nodes[xi].value, &self.nodes[ki].value, geom)?;
        let rg = self.needs(xi) || self.needs(ki);
        Ok(self.push(y, Op::Depthwise { x: xi, k: ki, win }, rg))
    }

    pub fn pointwise_conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(k)?);
        let y = conv::pointwise_raw(&self.nodes[xi].value, &self.nodes[ki].value)?;
        let rg = self.needs(xi) || self.needs(ki);
        Ok(self.push(y, Op::Pointwise { x: xi, k: ki }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let y = self.nodes[ai].value.add(&self.nodes[bi].value)?;
        let rg = self.needs(ai) || self.needs(bi);
        Ok(self.push(y, Op::Add(ai, bi), rg))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let xv = &self.nodes[xi].value;
        let bv = &self.nodes[bi].value;
        let c = *xv.shape().last().unwrap_or(&1);
        if bv.shape() != [c] {
            return Err(Error::shape(format!(
                "bias {:?} does not match last axis of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut y = xv.clone();
        for row in y.data_mut().chunks_exact_mut(c) {
            for (a, &b) in row.iter_mut().zip(bv.data()) {
                *a += b;
            }
        }
        let rg = self.needs(xi) || self.needs(bi);
        Ok(self.push(y, Op::BiasAdd { x: xi, b: bi }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = self.nodes[xi].value.map(|v| v.max(0.0));
        let rg = self.needs(xi);
        Ok(self.push(y, Op::Relu(xi), rg))
    }

    /// 2×2 max pooling with stride 2 over `(N, H, W, C)`; odd edges are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (y, argmax) = max_pool2_forward(&self.nodes[xi].value)?;
        let rg = self.needs(xi);
        Ok(self.push(y, Op::MaxPool2 { x: xi, argmax }, rg))
    }

    /// Mean over the spatial axes: `(N, H, W, C) -> (N, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let y = global_avg_pool_forward(xv)?;
        let pixels = xv.shape()[1] * xv.shape()[2];
        let rg = self.needs(xi);
        Ok(self.push(y, Op::GlobalAvgPool { x: xi, pixels }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = self.nodes[xi].value.reshape(shape)?;
        let rg = self.needs(xi);
        Ok(self.push(y, Op::Reshape(xi), rg))
    }

    /// `(N, ...) -> (N, prod(...))`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x)?.shape().to_vec();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Affine map `x · Wᵀ` with `x: (N, d)` and `W: (k, d)`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let y = linear_forward(&self.nodes[xi].value, &self.nodes[wi].value)?;
        let rg = self.needs(xi) || self.needs(wi);
        Ok(self.push(y, Op::Linear { x: xi, w: wi }, rg))
    }

    /// `s·x + b` for single-element `s`, `b`.
    pub fn scale_shift(&mut self, x: Var, s: Var, b: Var) -> Result<Var> {
        let (xi, si, bi) = (self.idx(x)?, self.idx(s)?, self.idx(b)?);
        let sv = self.nodes[si].value.item()?;
        let bv = self.nodes[bi].value.item()?;
        let y = self.nodes[xi].value.map(|v| sv * v + bv);
        let rg = self.needs(xi) || self.needs(si) || self.needs(bi);
        Ok(self.push(y, Op::ScaleShift { x: xi, s: si, b: bi }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.sum() as f32;
        let rg = self.needs(xi);
        Ok(self.push(Tensor::scalar(s), Op::Sum(xi), rg))
    }

    /// `Σ weights ⊙ x` with a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.shape() != weights.shape() {
            return Err(Error::shape(format!(
                "weighted_sum: {:?} vs {:?}",
                xv.shape(),
                weights.shape()
            )));
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rg = self.needs(xi);
        Ok(self.push(Tensor::scalar(s as f32), Op::WeightedSum { x: xi, weights }, rg))
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let lv = &self.nodes[li].value;
        let &[n, k] = lv.shape() else {
            return Err(Error::shape(format!("logits must be (N, K), got {:?}", lv.shape())));
        };
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(lv.data(), k);
        let mut loss = 0f64;
        for (row, &y) in probs.chunks_exact(k).zip(labels) {
            loss -= (row[y] as f64).max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("cross-entropy loss is {loss}")));
        }
        let rg = self.needs(li);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per recorded
    /// parameter, shaped like the parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, g, &mut grads);
        }

        let mut out = Gradients::new();
        for (name, &i) in &self.names {
            if i > li {
                continue;
            }
            let shape = self.nodes[i].value.shape().to_vec();
            let g = grads[i]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[i].value.len()]);
            out.insert(name.clone(), Tensor::from_parts(shape, g));
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, gv: Vec<f32>, grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let g = gv.as_slice();
        let acc = |j: usize, delta: Vec<f32>, grads: &mut [Option<Vec<f32>>]| match &mut grads[j] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Conv2d { x, k, bias, win } => {
                let kv = &self.nodes[*k].value;
                let t = kv.shape()[3];
                if self.needs(*x) {
                    acc(*x, conv::conv2d_grad_input(g, kv, win), grads);
                }
                if self.needs(*k) {
                    let xv = self.nodes[*x].value.data();
                    acc(*k, conv::conv2d_grad_kernel(g, xv, win, t), grads);
                }
                if let Some(b) = bias.filter(|&b| self.needs(b)) {
                    acc(b, channel_sums(g, t), grads);
                }
            }
            Op::Depthwise { x, k, win } => {
                if self.needs(*x) {
                    acc(*x, conv::depthwise_grad_input(g, &self.nodes[*k].value, win), grads);
                }
                if self.needs(*k) {
                    let xv = self.nodes[*x].value.data();
                    acc(*k, conv::depthwise_grad_kernel(g, xv, win), grads);
                }
            }
            Op::Pointwise { x, k } => {
                let kv = &self.nodes[*k].value;
                if self.needs(*x) {
                    acc(*x, conv::pointwise_grad_input(g, kv), grads);
                }
                if self.needs(*k) {
                    let (c, t) = (kv.shape()[0], kv.shape()[1]);
                    let xv = self.nodes[*x].value.data();
                    acc(*k, conv::pointwise_grad_kernel(g, xv, c, t), grads);
                }
            }
            Op::Add(a, b) => match (self.needs(*a), self.needs(*b)) {
                (true, true) => {
                    acc(*a, g.to_vec(), grads);
                    acc(*b, gv, grads);
                }
                (true, false) => acc(*a, gv, grads),
                (false, true) => acc(*b, gv, grads),
                (false, false) => {}
            },
            Op::BiasAdd { x, b } => {
                if self.needs(*b) {
                    let c = self.nodes[*b].value.len();
                    acc(*b, channel_sums(g, c), grads);
                }
                if self.needs(*x) {
                    acc(*x, gv, grads);
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = self.nodes[*x].value.data();
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    acc(*x, d, grads);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let mut d = vec![0f32; self.nodes[*x].value.len()];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        d[src] += gv;
                    }
                    acc(*x, d, grads);
                }
            }
            Op::GlobalAvgPool { x, pixels } => {
                if self.needs(*x) {
                    let xs = self.nodes[*x].value.shape();
                    let (n, c) = (xs[0], xs[3]);
                    let inv = 1.0 / *pixels as f64;
                    let mut d = Vec::with_capacity(self.nodes[*x].value.len());
                    for b in 0..n {
                        let row = &g[b * c..(b + 1) * c];
                        for _ in 0..*pixels {
                            d.extend(row.iter().map(|&v| (v as f64 * inv) as f32));
                        }
                    }
                    acc(*x, d, grads);
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    acc(*x, gv, grads);
                }
            }
            Op::Linear { x, w } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![0f64; n * d];
                    for r in 0..n {
                        for o in 0..k {
                            let gv = g[r * k + o] as f64;
                            for (dd, &wv) in dx[r * d..(r + 1) * d].iter_mut().zip(&wv.data()[o * d..(o + 1) * d]) {
                                *dd += gv * wv as f64;
                            }
                        }
                    }
                    acc(*x, dx.into_iter().map(|v| v as f32).collect(), grads);
                }
                if self.needs(*w) {
                    let mut dw = vec![0f64; k * d];
                    for r in 0..n {
                        let xrow = &xv.data()[r * d..(r + 1) * d];
                        for o in 0..k {
                            let gv = g[r * k + o] as f64;
                            for (dd, &xe) in dw[o * d..(o + 1) * d].iter_mut().zip(xrow) {
                                *dd += gv * xe as f64;
                            }
                        }
                    }
                    acc(*w, dw.into_iter().map(|v| v as f32).collect(), grads);
                }
            }
            Op::ScaleShift { x, s, b } => {
                let xv = self.nodes[*x].value.data();
                let sv = self.nodes[*s].value.data()[0];
                if self.needs(*x) {
                    acc(*x, g.iter().map(|&v| v * sv).collect(), grads);
                }
                if self.needs(*s) {
                    let ds: f64 = g.iter().zip(xv).map(|(&a, &b)| a as f64 * b as f64).sum();
                    acc(*s, vec![ds as f32], grads);
                }
                if self.needs(*b) {
                    let db: f64 = g.iter().map(|&v| v as f64).sum();
                    acc(*b, vec![db as f32], grads);
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    acc(*x, vec![g[0]; self.nodes[*x].value.len()], grads);
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.needs(*x) {
                    acc(*x, weights.data().iter().map(|&w| w * g[0]).collect(), grads);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let k = self.nodes[*logits].value.shape()[1];
                    let scale = g[0] as f64 / labels.len() as f64;
                    let mut d: Vec<f32> = probs.clone();
                    for (row, &y) in d.chunks_exact_mut(k).zip(labels) {
                        row[y] -= 1.0;
                        for v in row.iter_mut() {
                            *v = (*v as f64 * scale) as f32;
                        }
                    }
                    acc(*logits, d, grads);
                }
            }
        }
    }
}

fn channel_sums(g: &[f32], c: usize) -> Vec<f32> {
    let mut s = vec![0f64; c];
    for row in g.chunks_exact(c) {
        for (a, &v) in s.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    s.into_iter().map(|v| v as f32).collect()
}

pub(crate) fn softmax_rows(logits: &[f32], k: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / z) as f32));
    }
    out
}

pub(crate) fn max_pool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::shape(format!("max_pool2 needs (N, H, W, C), got {:?}", x.shape())));
    };
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(format!("max_pool2 on {h}x{w} leaves no pixels")));
    }
    let xs = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                        if best == usize::MAX || xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, oh, ow, c], out), argmax))
}

pub(crate) fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::shape(format!(
            "global_avg_pool needs (N, H, W, C), got {:?}",
            x.shape()
        )));
    };
    let mut out = Vec::with_capacity(n * c);
    let pixels = h * w;
    for img in x.data().chunks_exact(pixels * c) {
        let mut s = vec![0f64; c];
        for px in img.chunks_exact(c) {
            for (a, &v) in s.iter_mut().zip(px) {
                *a += v as f64;
            }
        }
        out.extend(s.into_iter().map(|v| (v / pixels as f64) as f32));
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub(crate) fn linear_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (&[n, d], &[k, wd]) = (x.shape(), w.shape()) else {
        return Err(Error::shape(format!(
            "linear needs x (N, d) and W (k, d), got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    };
    if d != wd {
        return Err(Error::shape(format!("linear: x has {d} features, W expects {wd}")));
    }
    let mut out = Vec::with_capacity(n * k);
    for xrow in x.data().chunks_exact(d) {
        for wrow in w.data().chunks_exact(d) {
            let s: f64 = xrow.iter().zip(wrow).map(|(&a, &b)| a as f64 * b as f64).sum();
            out.push(s as f32);
        }
    }
    Ok(Tensor::from_parts(vec![n, k], out))
}
