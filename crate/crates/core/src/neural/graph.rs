//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] consumes the tape and returns [`Gradients`] for all
//! nodes that depend on a trainable leaf.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Probability clamp used by the cross-entropy loss.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Batchnorm with frozen statistics.
    ChannelAffine { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Upsample2x(Var),
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    GroupMean { x: Var, group: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Bce { p: Var, target: Vec<f64>, weight: Vec<f64>, count: f64 },
    L1 { x: Var, target: Vec<f64>, weight: Vec<f64>, count: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batchnorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub name: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    train: bool,
    bn_stats: Vec<BatchStats>,
}

impl Graph {
    /// A graph whose batchnorm layers use batch statistics.
    pub fn training() -> Self {
        Self { train: true, ..Self::default() }
    }

    /// A graph whose batchnorm layers use running statistics.
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named trainable parameter; repeated calls with one name share the node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.variable(value.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats> {
        std::mem::take(&mut self.bn_stats)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).nchw()?;
        let (oc, ic, kh, kw) = self.value(w).nchw()?;
        if ic != c || kh != kw || kh % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv weight {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [oc] {
                return Err(Error::ShapeMismatch(format!("conv bias {:?}, expected [{oc}]", self.shape(b))));
            }
        }
        let geom = ConvGeometry { in_channels: c, out_channels: oc, kernel: kh, stride, pad: kh / 2, in_h: h, in_w: wd };
        let out = conv2d_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let shape = vec![n, oc, geom.out_h(), geom.out_w()];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Batchnorm over `(N, H, W)` per channel. In training graphs the batch
    /// statistics are used and recorded under `name`; otherwise the given
    /// running statistics are.
    pub fn batch_norm(
        &mut self,
        name: &str,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch(format!("batchnorm over {c} channels has bad affine shape")));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xs = self.value(x).data();
        let (mean, var_biased, var_unbiased) = if self.train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut ss = 0.0;
                for b in 0..n {
                    ss += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = ss;
            }
            let biased = var.iter().map(|s| s / m).collect::<Vec<_>>();
            let unbiased = var.iter().map(|s| if m > 1.0 { s / (m - 1.0) } else { 0.0 }).collect();
            (mean, biased, Some(unbiased))
        } else {
            let (rm, rv) = running.ok_or_else(|| {
                Error::Autodiff(format!("inference batchnorm `{name}` needs running statistics"))
            })?;
            (rm.to_vec(), rv.to_vec(), None)
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        let op = if let Some(unbiased) = var_unbiased {
            self.bn_stats.push(BatchStats { name: name.to_string(), mean, var: unbiased });
            Op::BatchNorm { x, gamma, beta, xhat, inv_std }
        } else {
            Op::ChannelAffine { x, gamma, beta, xhat, inv_std }
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Nearest-neighbour 2x upsampling cropped to `(out_h, out_w)`.
    pub fn upsample2x(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if out_h > 2 * h || out_w > 2 * w || out_h == 0 || out_w == 0 {
            return Err(Error::ShapeMismatch(format!("cannot upsample {h}x{w} to {out_h}x{out_w}")));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for y in 0..out_h {
                for xx in 0..out_w {
                    d[y * out_w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, out_h, out_w], out)?, Op::Upsample2x(x), rg))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).nchw()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).nchw()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "concat of {:?} with {:?}",
                    self.shape(parts[0]),
                    self.shape(p)
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
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![n, total_c, h, w], out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Element-wise mean of equally shaped tensors.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Empty("mean of no tensors".into()))?;
        let shape = self.shape(*first).to_vec();
        let mut acc = vec![0.0; self.value(*first).len()];
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!("mean of {shape:?} with {:?}", self.shape(p))));
            }
            for (a, v) in acc.iter_mut().zip(self.value(p).data()) {
                *a += v;
            }
        }
        let k = parts.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, acc)?, Op::Mean(parts.to_vec()), rg))
    }

    /// Average consecutive groups of `group` batch items: `[N*group, ...] -> [N, ...]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if group == 0 || shape.is_empty() || shape[0] % group != 0 {
            return Err(Error::ShapeMismatch(format!("cannot group {shape:?} by {group}")));
        }
        let item: usize = shape[1..].iter().product();
        let n = shape[0] / group;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * item];
        for b in 0..n {
            let dst = &mut out[b * item..(b + 1) * item];
            for k in 0..group {
                let s = &src[(b * group + k) * item..(b * group + k + 1) * item];
                dst.iter_mut().zip(s).for_each(|(d, v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d /= group as f64);
        }
        let mut out_shape = shape;
        out_shape[0] = n;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::GroupMean { x, group }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy over cells with nonzero `weight`.
    pub fn bce(&mut self, p: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        let probs = self.value(p).data();
        if target.len() != probs.len() || weight.len() != probs.len() {
            return Err(Error::ShapeMismatch("cross-entropy target does not match prediction".into()));
        }
        let count: f64 = weight.iter().filter(|&&w| w != 0.0).count() as f64;
        if count == 0.0 {
            return Err(Error::NoValidPixels("cross-entropy has no valid cells".into()));
        }
        let mut loss = 0.0;
        for ((&q, &y), &w) in probs.iter().zip(target).zip(weight) {
            if w != 0.0 {
                let q = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            }
        }
        let rg = self.rg(p);
        let op = Op::Bce { p, target: target.to_vec(), weight: weight.to_vec(), count };
        Ok(self.push(Tensor::scalar(loss / count), op, rg))
    }

    /// Mean absolute error over cells with nonzero `weight`.
    pub fn l1(&mut self, x: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        let xs = self.value(x).data();
        if target.len() != xs.len() || weight.len() != xs.len() {
            return Err(Error::ShapeMismatch("L1 target does not match prediction".into()));
        }
        let count: f64 = weight.iter().filter(|&&w| w != 0.0).count() as f64;
        if count == 0.0 {
            return Err(Error::NoValidPixels("L1 loss has no valid cells".into()));
        }
        let loss: f64 = xs
            .iter()
            .zip(target)
            .zip(weight)
            .filter(|(_, &w)| w != 0.0)
            .map(|((a, b), _)| (a - b).abs())
            .sum();
        let rg = self.rg(x);
        let op = Op::L1 { x, target: target.to_vec(), weight: weight.to_vec(), count };
        Ok(self.push(Tensor::scalar(loss / count), op, rg))
    }

    /// Run reverse-mode differentiation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autodiff("loss is not a node of this graph".into()))?;
        if node.value.len() != 1 {
            return Err(Error::Autodiff(format!("loss must be a scalar, got shape {:?}", node.value.shape())));
        }
        if !node.requires_grad {
            return Err(Error::Autodiff("loss is detached from every trainable tensor".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let tensors = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        let mut params: Vec<(String, Var)> = self.params.into_iter().collect();
        params.sort();
        Ok(Gradients { grads: tensors, params })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let n = self.nodes[x.0].value.shape()[0];
                let (dx, dw, db) = conv2d_backward(geom, n, val(*x), val(*w), gy, self.rg(*x));
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                send(*w, dw);
                if let Some(b) = b {
                    send(*b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = self.nodes[x.0].value.nchw().expect("nchw");
                let hw = h * w;
                let m = (n * hw) as f64;
                let g = val(*gamma);
                let (dgamma, dbeta) = affine_param_grads(gy, xhat, n, c, hw);
                if self.rg(*x) {
                    let mut dx = vec![0.0; gy.len()];
                    for ch in 0..c {
                        // dx = g * inv_std / m * (m dy - sum(dy) - xhat sum(dy xhat))
                        let k = g[ch] * inv_std[ch] / m;
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] = k * (m * gy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::ChannelAffine { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = self.nodes[x.0].value.nchw().expect("nchw");
                let hw = h * w;
                let g = val(*gamma);
                let (dgamma, dbeta) = affine_param_grads(gy, xhat, n, c, hw);
                if self.rg(*x) {
                    let mut dx = vec![0.0; gy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let k = g[ch] * inv_std[ch];
                            for i in base..base + hw {
                                dx[i] = k * gy[i];
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Relu(x) => {
                let dx = val(*x).iter().zip(gy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                send(*x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let dx = val(*x).iter().zip(gy).map(|(&v, &g)| if v > 0.0 { g } else { slope * g }).collect();
                send(*x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = node.value.data().iter().zip(gy).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                send(*x, dx);
            }
            Op::Scale(x, f) => send(*x, gy.iter().map(|g| g * f).collect()),
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.nodes[x.0].value.nchw().expect("nchw");
                let (_, _, oh, ow) = node.value.nchw().expect("nchw");
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let src = &gy[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = node.value.nchw().expect("nchw");
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.shape()[1];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let start = (b * total_c + offset) * hw;
                            dp.extend_from_slice(&gy[start..start + pc * hw]);
                        }
                        send(p, dp);
                    }
                    offset += pc;
                }
            }
            Op::Mean(parts) => {
                let k = parts.len() as f64;
                for &p in parts {
                    send(p, gy.iter().map(|g| g / k).collect());
                }
            }
            Op::GroupMean { x, group } => {
                let item = gy.len() / node.value.shape()[0];
                let mut dx = Vec::with_capacity(gy.len() * group);
                for chunk in gy.chunks(item) {
                    for _ in 0..*group {
                        dx.extend(chunk.iter().map(|g| g / *group as f64));
                    }
                }
                send(*x, dx);
            }
            Op::Add(a, b) => {
                send(*a, gy.to_vec());
                send(*b, gy.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, gy.iter().zip(vb).map(|(g, y)| g * y).collect());
                send(*b, gy.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Sum(x) => send(*x, vec![gy[0]; self.nodes[x.0].value.len()]),
            Op::Bce { p, target, weight, count } => {
                let g0 = gy[0] / count;
                let dp = val(*p)
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((&q, &y), &w)| {
                        if w == 0.0 || q < BCE_CLAMP || q > 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            g0 * (-y / q + (1.0 - y) / (1.0 - q))
                        }
                    })
                    .collect();
                send(*p, dp);
            }
            Op::L1 { x, target, weight, count } => {
                let g0 = gy[0] / count;
                let dx = val(*x)
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((&a, &b), &w)| {
                        let d = a - b;
                        if w == 0.0 || d == 0.0 {
                            0.0
                        } else {
                            g0 * d.signum()
                        }
                    })
                    .collect();
                send(*x, dx);
            }
        }
    }
}

fn affine_param_grads(gy: &[f64], xhat: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] += gy[i] * xhat[i];
                dbeta[ch] += gy[i];
            }
        }
    }
    (dgamma, dbeta)
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).and_then(|(_, v)| self.get(*v))
    }

    /// Gradients of every named parameter, in name order.
    pub fn into_param_grads(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::training();
        let x = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        assert_eq!(g.value(loss).item(), 5.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_and_non_scalar_losses_fail() {
        let mut g = Graph::training();
        let x = g.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let s = g.sum(x);
        assert!(matches!(g.backward(s), Err(Error::Autodiff(_))));

        let mut g = Graph::training();
        let x = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Autodiff(_))));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut g = Graph::training();
        let w = Tensor::new(vec![1], vec![3.0]).unwrap();
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a, b);
        let y = g.add(a, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap().into_param_grads();
        assert_eq!(grads["w"].data(), &[2.0]);
    }

    #[test]
    fn bce_closed_forms() {
        let mut g = Graph::training();
        let p = g.variable(Tensor::new(vec![4], vec![0.5; 4]).unwrap());
        let l = g.bce(p, &[0.0, 1.0, 1.0, 0.0], &[1.0; 4]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let p = g.variable(Tensor::new(vec![2], vec![0.9, 0.3]).unwrap());
        let l = g.bce(p, &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((g.value(l).item() - 0.105_360_515_657_826_3).abs() < 1e-12);

        let p = g.variable(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let l = g.bce(p, &[0.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!(g.value(l).item() <= 1e-6);

        let p = g.variable(Tensor::new(vec![1], vec![0.5]).unwrap());
        assert!(matches!(g.bce(p, &[1.0], &[0.0]), Err(Error::NoValidPixels(_))));
    }

    #[test]
    fn inference_batchnorm_needs_running_stats() {
        let mut g = Graph::inference();
        let x = g.input(Tensor::zeros(&[1, 2, 2, 2]));
        let gamma = g.param("g", &Tensor::filled(&[2], 1.0));
        let beta = g.param("b", &Tensor::zeros(&[2]));
        assert!(g.batch_norm("bn", x, gamma, beta, None).is_err());
        let y = g.batch_norm("bn", x, gamma, beta, Some((&[0.0, 0.0], &[1.0, 1.0]))).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_crops_odd_sizes() {
        let mut g = Graph::training();
        let x = g.variable(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.upsample2x(x, 3, 4).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0, 2.0, 2.0]);
    }
}
