//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are stored in creation order, which is already a topological order, so
//! [`Graph::backward`] simply walks the tape in reverse.

use std::collections::HashMap;

use super::kernels::{self, ConvGeometry, ConvWants};
use super::{gemm, MatRef, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Label value skipped by [`Graph::softmax_cross_entropy`].
pub const IGNORE_LABEL: u8 = 255;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeometry },
    Relu(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    Concat { parts: Vec<Var> },
    SliceChannels { input: Var, start: usize },
    Reshape(Var),
    ForegroundProb(Var),
    Bilinear { input: Var },
    GlobalAvgPool(Var),
    Linear { input: Var, weight: Var, bias: Var },
    SoftmaxCe { logits: Var, labels: Vec<u8>, probs: Vec<T>, count: usize },
    SmoothL1 { pred: Var, diff: Vec<T>, mask: Vec<T>, count: usize },
    Sum(Var),
    Scale(Var, T),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::non_finite(what));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter; repeated binds of the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let mut t = p.tensor.clone();
        t.zero_grad();
        let v = if p.frozen { self.input(t) } else { self.leaf(t) };
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::config(format!(
                "conv2d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if self.value(bias).numel() != cout {
            return Err(Error::config(format!("conv2d: bias needs {cout} values")));
        }
        if stride == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::config(format!(
                "conv2d: kernel {kh}×{kw} with padding {padding} does not fit {h}×{w}"
            )));
        }
        let geom = ConvGeometry { cin, h, w, cout, kh, kw, stride, padding };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            n,
            &geom,
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let t = Tensor::new([n, cout, geom.out_h(), geom.out_w()], out)?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(t, Op::Conv2d { input, weight, bias, geom }, ng, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let t = Tensor::new(src.shape(), src.data().iter().map(|&v| v.max(T::zero())).collect())?;
        let ng = self.needs(x);
        self.push(t, Op::Relu(x), ng, "relu")
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || stride == 0 {
            return Err(Error::config("maxpool2d: window and stride must be positive"));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), n * c, h, w, k, stride);
        let shape = [n, c, kernels::pool_out_len(h, k, stride), kernels::pool_out_len(w, k, stride)];
        let t = Tensor::new(shape, out)?;
        let ng = self.needs(x);
        self.push(t, Op::MaxPool { input: x, argmax }, ng, "maxpool2d")
    }

    pub fn channel_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat_channels(&[a, b])
    }

    /// Concatenates feature maps along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::config(format!(
                    "channel_concat: spatial mismatch {n}×{h}×{w} vs {pn}×{ph}×{pw}"
                )));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let t = Tensor::new([n, total_c, h, w], out)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(t, Op::Concat { parts: parts.to_vec() }, ng, "channel_concat")
    }

    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::config(format!("channel_slice {start}..{} of {c} channels", start + len)));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&src[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let t = Tensor::new([n, len, h, w], out)?;
        let ng = self.needs(x);
        self.push(t, Op::SliceChannels { input: x, start }, ng, "channel_slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.needs(x);
        self.push(t, Op::Reshape(x), ng, "reshape")
    }

    /// Softmax probability of class 1 from two-class logits `[N,2,H,W]`, as `[N,1,H,W]`.
    pub fn foreground_prob(&mut self, logits: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).dims4()?;
        if c != 2 {
            return Err(Error::config(format!("foreground_prob needs 2 logit channels, got {c}")));
        }
        let hw = h * w;
        let src = self.value(logits).data();
        let mut out = Vec::with_capacity(n * hw);
        for b in 0..n {
            let l0 = &src[b * 2 * hw..(b * 2 + 1) * hw];
            let l1 = &src[(b * 2 + 1) * hw..(b * 2 + 2) * hw];
            out.extend(l0.iter().zip(l1).map(|(&a, &b)| T::one() / (T::one() + (a - b).exp())));
        }
        let t = Tensor::new([n, 1, h, w], out)?;
        let ng = self.needs(logits);
        self.push(t, Op::ForegroundProb(logits), ng, "foreground_prob")
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::config("bilinear_resize: output size must be positive"));
        }
        let out = kernels::bilinear_forward(self.value(x).data(), n * c, h, w, out_h, out_w);
        let t = Tensor::new([n, c, out_h, out_w], out)?;
        let ng = self.needs(x);
        self.push(t, Op::Bilinear { input: x }, ng, "bilinear_resize")
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let out = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let t = Tensor::new([n, c], out)?;
        let ng = self.needs(x);
        self.push(t, Op::GlobalAvgPool(x), ng, "global_avg_pool")
    }

    /// Fully connected layer: `[N,F] × [O,F]ᵀ + [O] -> [N,O]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let (n, f) = match xs.as_slice() {
            [n, f] => (*n, *f),
            _ => return Err(Error::config(format!("linear: input must be N×F, got {xs:?}"))),
        };
        let o = match ws.as_slice() {
            [o, wf] if *wf == f => *o,
            _ => return Err(Error::config(format!("linear: weight {ws:?} does not match {f} features"))),
        };
        if self.value(bias).numel() != o {
            return Err(Error::config(format!("linear: bias needs {o} values")));
        }
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        gemm(
            MatRef::new(self.value(x).data(), n, f),
            MatRef::new(self.value(weight).data(), o, f).t(),
            T::one(),
            &mut out,
        );
        let t = Tensor::new([n, o], out)?;
        let ng = self.needs(x) || self.needs(weight) || self.needs(bias);
        self.push(t, Op::Linear { input: x, weight, bias }, ng, "linear")
    }

    /// Mean negative log-likelihood over positions whose label is not
    /// [`IGNORE_LABEL`]. Logits are `[N,K,...]` with classes on axis 1; labels
    /// are indexed `n * spatial + position`. With no labelled position the loss is 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::config("softmax_cross_entropy: logits need a class axis"));
        }
        let (n, k) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if k < 2 {
            return Err(Error::config("softmax_cross_entropy: need at least two classes"));
        }
        if labels.len() != n * spatial {
            return Err(Error::config(format!(
                "softmax_cross_entropy: {} labels for {} positions",
                labels.len(),
                n * spatial
            )));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for b in 0..n {
            for s in 0..spatial {
                let label = labels[b * spatial + s];
                if label == IGNORE_LABEL {
                    continue;
                }
                if label as usize >= k {
                    return Err(Error::config(format!("label {label} out of range for {k} classes")));
                }
                let at = |c: usize| (b * k + c) * spatial + s;
                let max = (0..k).map(|c| src[at(c)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..k).map(|c| (src[at(c)].as_f64() - max).exp()).sum();
                for c in 0..k {
                    probs[at(c)] = T::of((src[at(c)].as_f64() - max).exp() / denom);
                }
                total += denom.ln() + max - src[at(label as usize)].as_f64();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(T::of(loss)),
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs, count },
            ng,
            "softmax_cross_entropy",
        )
    }

    /// Smooth-L1 summed over elements where `mask != 0`, divided by that count.
    /// Only `pred` receives a gradient.
    pub fn smooth_l1(&mut self, pred: Var, target: &[T], mask: &[T]) -> Result<Var> {
        let p = self.value(pred).data();
        if target.len() != p.len() || mask.len() != p.len() {
            return Err(Error::config(format!(
                "smooth_l1: pred has {} values, target {}, mask {}",
                p.len(),
                target.len(),
                mask.len()
            )));
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        let mut diff = vec![T::zero(); p.len()];
        for i in 0..p.len() {
            if mask[i] == T::zero() {
                continue;
            }
            let d = p[i] - target[i];
            diff[i] = d;
            let a = d.abs().as_f64();
            total += if a < 1.0 { 0.5 * a * a } else { a - 0.5 };
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.needs(pred);
        self.push(
            Tensor::scalar(T::of(loss)),
            Op::SmoothL1 { pred, diff, mask: mask.to_vec(), count },
            ng,
            "smooth_l1",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x), ng, "sum")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let src = self.value(x);
        let t = Tensor::new(src.shape(), src.data().iter().map(|&v| v * factor).collect())?;
        let ng = self.needs(x);
        self.push(t, Op::Scale(x, factor), ng, "scale")
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes, accumulated in f64.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0f64;
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::config("weighted_sum: every term must be a scalar"));
            }
            total += w * self.value(v).item().as_f64();
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        let terms = terms.iter().map(|&(v, w)| (v, T::of(w))).collect();
        self.push(Tensor::scalar(T::of(total)), Op::WeightedSum(terms), ng, "weighted_sum")
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::config("backward: loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let acc = |v: Var, delta: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(buf) => buf.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, weight, bias, geom } => {
                    let wants = ConvWants {
                        input: self.needs(*input),
                        weight: self.needs(*weight),
                        bias: self.needs(*bias),
                    };
                    let n = self.value(*input).shape()[0];
                    let cg = kernels::conv2d_backward(
                        self.value(*input).data(),
                        n,
                        geom,
                        self.value(*weight).data(),
                        &g,
                        wants,
                    );
                    if let Some(gx) = cg.input {
                        acc(*input, gx, &mut grads);
                    }
                    if let Some(gw) = cg.weight {
                        acc(*weight, gw, &mut grads);
                    }
                    if let Some(gb) = cg.bias {
                        acc(*bias, gb, &mut grads);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx = xv.iter().zip(&g).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
                    acc(*x, gx, &mut grads);
                }
                Op::MaxPool { input, argmax } => {
                    let gx = kernels::maxpool_backward(self.value(*input).numel(), argmax, &g);
                    acc(*input, gx, &mut grads);
                }
                Op::Concat { parts } => {
                    let (n, total_c, h, w) = node.value.dims4()?;
                    let hw = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[1];
                        if self.needs(p) {
                            let mut gp = Vec::with_capacity(n * pc * hw);
                            for b in 0..n {
                                let start = (b * total_c + offset) * hw;
                                gp.extend_from_slice(&g[start..start + pc * hw]);
                            }
                            acc(p, gp, &mut grads);
                        }
                        offset += pc;
                    }
                }
                Op::SliceChannels { input, start } => {
                    let (n, c, h, w) = self.value(*input).dims4()?;
                    let len = node.value.shape()[1];
                    let hw = h * w;
                    let mut gx = vec![T::zero(); n * c * hw];
                    for b in 0..n {
                        let dst = (b * c + start) * hw;
                        gx[dst..dst + len * hw].copy_from_slice(&g[b * len * hw..(b + 1) * len * hw]);
                    }
                    acc(*input, gx, &mut grads);
                }
                Op::Reshape(x) => acc(*x, g, &mut grads),
                Op::ForegroundProb(x) => {
                    let (n, _, h, w) = node.value.dims4()?;
                    let hw = h * w;
                    let p = node.value.data();
                    let mut gx = vec![T::zero(); n * 2 * hw];
                    for b in 0..n {
                        for s in 0..hw {
                            let pv = p[b * hw + s];
                            let d = g[b * hw + s] * pv * (T::one() - pv);
                            gx[b * 2 * hw + s] = -d;
                            gx[(b * 2 + 1) * hw + s] = d;
                        }
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::Bilinear { input } => {
                    let (n, c, h, w) = self.value(*input).dims4()?;
                    let (_, _, oh, ow) = node.value.dims4()?;
                    acc(*input, kernels::bilinear_backward(&g, n * c, h, w, oh, ow), &mut grads);
                }
                Op::GlobalAvgPool(x) => {
                    let (_, _, h, w) = self.value(*x).dims4()?;
                    let hw = h * w;
                    let inv = T::of(1.0 / hw as f64);
                    let gx = g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, hw)).collect();
                    acc(*x, gx, &mut grads);
                }
                Op::Linear { input, weight, bias } => {
                    let (n, f) = (self.value(*input).shape()[0], self.value(*input).shape()[1]);
                    let o = self.value(*weight).shape()[0];
                    let gy = MatRef::new(&g, n, o);
                    if self.needs(*input) {
                        let mut gx = vec![T::zero(); n * f];
                        gemm(gy, MatRef::new(self.value(*weight).data(), o, f), T::zero(), &mut gx);
                        acc(*input, gx, &mut grads);
                    }
                    if self.needs(*weight) {
                        let mut gw = vec![T::zero(); o * f];
                        gemm(gy.t(), MatRef::new(self.value(*input).data(), n, f), T::zero(), &mut gw);
                        acc(*weight, gw, &mut grads);
                    }
                    if self.needs(*bias) {
                        let mut gb = vec![T::zero(); o];
                        for row in g.chunks(o) {
                            gb.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
                        }
                        acc(*bias, gb, &mut grads);
                    }
                }
                Op::SoftmaxCe { logits, labels, probs, count } => {
                    let mut gx = vec![T::zero(); probs.len()];
                    if *count > 0 {
                        let shape = self.value(*logits).shape();
                        let (n, k) = (shape[0], shape[1]);
                        let spatial: usize = shape[2..].iter().product();
                        let scale = g[0] / T::of(*count as f64);
                        for b in 0..n {
                            for s in 0..spatial {
                                let label = labels[b * spatial + s];
                                if label == IGNORE_LABEL {
                                    continue;
                                }
                                for c in 0..k {
                                    let i = (b * k + c) * spatial + s;
                                    let target = if c == label as usize { T::one() } else { T::zero() };
                                    gx[i] = (probs[i] - target) * scale;
                                }
                            }
                        }
                    }
                    acc(*logits, gx, &mut grads);
                }
                Op::SmoothL1 { pred, diff, mask, count } => {
                    let mut gx = vec![T::zero(); diff.len()];
                    if *count > 0 {
                        let scale = g[0] / T::of(*count as f64);
                        for i in 0..diff.len() {
                            if mask[i] == T::zero() {
                                continue;
                            }
                            let d = diff[i];
                            let slope = if d.abs() < T::one() { d } else { d.signum() };
                            gx[i] = slope * scale;
                        }
                    }
                    acc(*pred, gx, &mut grads);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    acc(*x, vec![g[0]; n], &mut grads);
                }
                Op::Scale(x, factor) => {
                    acc(*x, g.iter().map(|&d| d * *factor).collect(), &mut grads);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc(v, vec![g[0] * w], &mut grads);
                    }
                }
            }
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::non_finite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every bound, trainable parameter into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (&id, &v) in ids {
            if let Some(g) = self.get(v) {
                store.get_mut(id).tensor.accumulate_grad(g);
            }
        }
    }
}
