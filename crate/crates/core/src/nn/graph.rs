//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] lives for one forward/backward pass. Parameters are bound
//! from a [`ParamStore`] by name; names under a frozen prefix are bound as
//! constants, so gradients still flow through them to their inputs but
//! never to the parameters themselves.

use std::sync::Arc;

use indexmap::IndexMap;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Powf(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softplus(Var),
    Huber(Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    RepeatBatch(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        dims: [usize; 4],
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2x(Var),
    SoftmaxLast(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }
}

/// Batch statistics from a training-mode batch norm call.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    frozen: Vec<String>,
    bound: IndexMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let inner: usize = shape[2..].iter().product();
    (shape[0], shape[1], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: Vec::new(),
            bound: IndexMap::new(),
        }
    }

    /// Parameters whose names start with `prefix` are bound as constants.
    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), true)
    }

    /// Binds parameter `name`. Repeated binds return the same node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store.param(name)?.clone();
        let trainable = !self.is_frozen(name);
        let v = self.leaf(value, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                ctx,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, ctx: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(ctx, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
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

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let p = T::of(p);
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(
            a,
            |x| if x > T::zero() { x } else { x * s },
            Op::LeakyRelu(a, s),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `log(1 + e^x)` via `max(x, 0) + log(1 + e^{-|x|})`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Elementwise smooth-L1: `0.5·d²` for `|d| < 1`, else `|d| − 0.5`.
    pub fn huber(&mut self, a: Var) -> Var {
        let half = T::of(0.5);
        self.unary(
            a,
            |d| {
                if d.abs() < T::one() {
                    half * d * d
                } else {
                    d.abs() - half
                }
            },
            Op::Huber(a),
        )
    }

    /// `x [B,C,...] + b[C]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(b) != [shape[1]] {
            return Err(Error::shape(
                "add_channel",
                format!("{shape:?} with bias {:?}", self.shape(b)),
            ));
        }
        let (_, c, inner) = channel_layout(&shape);
        let bias = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[(i / inner) % c])
            .collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddChannel(x, b), &[x, b]))
    }

    /// `x [B,C,...] * s[B,C]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(s) != [shape[0], shape[1]] {
            return Err(Error::shape(
                "mul_channel",
                format!("{shape:?} with scale {:?}", self.shape(s)),
            ));
        }
        let (_, _, inner) = channel_layout(&shape);
        let sc = self.data(s);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sc[i / inner])
            .collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::MulChannel(x, s), &[x, s]))
    }

    /// Tiles a `[1, ...]` tensor `n` times along the batch axis.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&1) {
            return Err(Error::shape("repeat_batch", format!("{shape:?} is not a single item")));
        }
        let mut out_shape = shape;
        out_shape[0] = n;
        let data = self.data(x).repeat(n);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::RepeatBatch(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / T::of(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("sum_last", "scalar input"))?;
        let data = self
            .data(x)
            .chunks_exact(n.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let out = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.push(out, Op::SumLast(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rest = shape[1..].iter().product();
        self.reshape(x, &[shape[0], rest])
    }

    /// `x [B,I]·w[O,I]ᵀ + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?} with weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let (bsz, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); bsz * o];
        T::gemm(bsz, i, o, self.data(x), false, self.data(w), true, &mut out, T::zero());
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_exact_mut(o) {
                row.iter_mut().zip(bias).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(vec![bsz, o], out)?, Op::Linear { x, w, b }, &inputs))
    }

    /// Batched `op(a)·op(b)` over `[G, ·, ·]` tensors.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})")));
        }
        let g = sa[0];
        let mut out = vec![T::zero(); g * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..g {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                ta,
                &db[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let op = Op::Bmm {
            a,
            b,
            ta,
            tb,
            dims: [g, m, k, n],
        };
        Ok(self.push(Tensor::new(vec![g, m, n], out)?, op, &[a, b]))
    }

    /// Zero-padded cross-correlation: `x [B,C,H,W]`, `w [O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("input {xs:?} with weight {ws:?}")));
        }
        let k = ws[2];
        let dims = (
            ConvGeom::out_dim(xs[2], k, stride, pad),
            ConvGeom::out_dim(xs[3], k, stride, pad),
        );
        let (Some(ho), Some(wo)) = dims else {
            return Err(Error::shape("conv2d", format!("kernel {k} too large for {xs:?}")));
        };
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            h: xs[2],
            w: xs[3],
            out_ch: ws[0],
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(self.data(x), self.data(w), &geom);
        let value = Tensor::new(vec![xs[0], ws[0], ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || k == 0 || stride == 0 || xs[2] < k || xs[3] < k {
            return Err(Error::shape("max_pool2d", format!("{xs:?} with k={k} s={stride}")));
        }
        let geom = PoolGeom {
            planes: xs[0] * xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            ho: (xs[2] - k) / stride + 1,
            wo: (xs[3] - k) / stride + 1,
        };
        let (out, argmax) = kernels::max_pool_forward(self.data(x), &geom);
        let value = Tensor::new(vec![xs[0], xs[1], geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample2x", format!("{xs:?}")));
        }
        let out = kernels::upsample2x_forward(self.data(x), xs[0] * xs[1], xs[2], xs[3]);
        let value = Tensor::new(vec![xs[0], xs[1], 2 * xs[2], 2 * xs[3]], out)?;
        Ok(self.push(value, Op::Upsample2x(x), &[x]))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxLast(x), &[x]))
    }

    /// Batch normalization with batch statistics over every axis but 1.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let shape = self.shape(x).to_vec();
        self.check_bn(&shape, gamma, beta)?;
        let (b, c, inner) = channel_layout(&shape);
        let n = b * inner;
        if n < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("training mode needs more than one value per channel, got {shape:?}"),
            ));
        }
        let xd = self.data(x);
        let nf = T::of(n as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let s = &xd[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
                mean[ci] += s.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        for bi in 0..b {
            for ci in 0..c {
                let s = &xd[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
                var[ci] += s.iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / nf);
        let eps = T::of(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for (i, &v) in xd.iter().enumerate() {
            let ci = (i / inner) % c;
            let h = (v - mean[ci]) * inv_std[ci];
            xhat.push(h);
            out.push(gd[ci] * h + bd[ci]);
        }
        let correction = T::of(n as f64 / (n as f64 - 1.0));
        let stats = BatchStats {
            mean,
            var: var.iter().map(|&v| v * correction).collect(),
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok((self.push(Tensor::new(shape, out)?, op, &[x, gamma, beta]), stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        self.check_bn(&shape, gamma, beta)?;
        let (_, c, inner) = channel_layout(&shape);
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let eps = T::of(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(self.value(x).numel());
        let mut out = Vec::with_capacity(xhat.capacity());
        for (i, &v) in self.data(x).iter().enumerate() {
            let ci = (i / inner) % c;
            let h = (v - mean[ci]) * inv_std[ci];
            xhat.push(h);
            out.push(gd[ci] * h + bd[ci]);
        }
        let op = Op::BatchNormInfer {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, &[x, gamma, beta]))
    }

    fn check_bn(&self, shape: &[usize], gamma: Var, beta: Var) -> Result<()> {
        if shape.len() < 2 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "input {shape:?} with scale {:?} and shift {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(())
    }

    /// Mean softmax cross-entropy of `logits [B,K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} with {} targets", targets.len()),
            ));
        }
        let k = shape[1];
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target class {t} out of range for {k} logits")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_exact_mut(k).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let loss = loss / T::of(targets.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Names and nodes of every trainable parameter bound so far.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every bound trainable parameter; parameters the loss
    /// does not reach get zeros.
    pub fn param_grads(&self, grads: &Grads<T>) -> IndexMap<String, Tensor<T>> {
        self.trainable()
            .map(|(name, v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.to_string(), g)
            })
            .collect()
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a single value"));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = slots[i].take() else {
                continue;
            };
            self.backward_node(node, g.data(), &mut slots);
            slots[i] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor<T>>], v: Var, grad: Vec<T>) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(grad.len(), node.value.numel());
        match &mut slots[v.0] {
            Some(t) => t
                .data_mut()
                .iter_mut()
                .zip(grad)
                .for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(
                    Tensor::new(node.value.shape().to_vec(), grad).expect("gradient shape"),
                )
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn elementwise(&self, slots: &mut [Option<Tensor<T>>], a: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        if self.wants(a) {
            let grad = g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
            self.accumulate(slots, a, grad);
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], slots: &mut [Option<Tensor<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.elementwise(slots, *a, g, |_, gi| gi);
                self.elementwise(slots, *b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.elementwise(slots, *a, g, |_, gi| gi);
                self.elementwise(slots, *b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.elementwise(slots, *a, g, |i, gi| gi * db[i]);
                self.elementwise(slots, *b, g, |i, gi| gi * da[i]);
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.elementwise(slots, *a, g, |i, gi| gi / db[i]);
                self.elementwise(slots, *b, g, |i, gi| -gi * da[i] / (db[i] * db[i]));
            }
            Op::Scale(a, c) => self.elementwise(slots, *a, g, |_, gi| gi * *c),
            Op::AddScalar(a) => self.elementwise(slots, *a, g, |_, gi| gi),
            Op::Powf(a, p) => {
                let da = self.data(*a);
                let p1 = *p - T::one();
                self.elementwise(slots, *a, g, |i, gi| gi * *p * da[i].powf(p1));
            }
            Op::Relu(a) => {
                let da = self.data(*a);
                self.elementwise(slots, *a, g, |i, gi| if da[i] > T::zero() { gi } else { T::zero() });
            }
            Op::LeakyRelu(a, s) => {
                let da = self.data(*a);
                self.elementwise(slots, *a, g, |i, gi| if da[i] > T::zero() { gi } else { gi * *s });
            }
            Op::Sigmoid(a) => self.elementwise(slots, *a, g, |i, gi| gi * y[i] * (T::one() - y[i])),
            Op::Softplus(a) => {
                let da = self.data(*a);
                self.elementwise(slots, *a, g, |i, gi| gi * sigmoid(da[i]));
            }
            Op::Huber(a) => {
                let da = self.data(*a);
                self.elementwise(slots, *a, g, |i, gi| {
                    let d = da[i];
                    if d.abs() < T::one() {
                        gi * d
                    } else {
                        gi * d.signum()
                    }
                });
            }
            Op::AddChannel(x, b) => {
                self.elementwise(slots, *x, g, |_, gi| gi);
                if self.wants(*b) {
                    let (_, c, inner) = channel_layout(self.shape(*x));
                    let mut gb = vec![T::zero(); c];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[(i / inner) % c] += gi;
                    }
                    self.accumulate(slots, *b, gb);
                }
            }
            Op::MulChannel(x, s) => {
                let (_, _, inner) = channel_layout(self.shape(*x));
                let (dx, ds) = (self.data(*x), self.data(*s));
                self.elementwise(slots, *x, g, |i, gi| gi * ds[i / inner]);
                if self.wants(*s) {
                    let mut gs = vec![T::zero(); ds.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        gs[i / inner] += gi * dx[i];
                    }
                    self.accumulate(slots, *s, gs);
                }
            }
            Op::RepeatBatch(x) => {
                if self.wants(*x) {
                    let per = self.value(*x).numel();
                    let mut gx = vec![T::zero(); per];
                    for chunk in g.chunks_exact(per) {
                        gx.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                    }
                    self.accumulate(slots, *x, gx);
                }
            }
            Op::Sum(x) => self.elementwise_fill(slots, *x, g[0]),
            Op::Mean(x) => {
                let n = T::of(self.value(*x).numel() as f64);
                self.elementwise_fill(slots, *x, g[0] / n);
            }
            Op::SumLast(x) => {
                if self.wants(*x) {
                    let n = *self.shape(*x).last().expect("nonscalar");
                    let gx = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, n)).collect();
                    self.accumulate(slots, *x, gx);
                }
            }
            Op::Reshape(x) => self.elementwise(slots, *x, g, |_, gi| gi),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (bsz, i) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); bsz * i];
                    T::gemm(bsz, o, i, g, false, self.data(*w), false, &mut gx, T::zero());
                    self.accumulate(slots, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); o * i];
                    T::gemm(o, bsz, i, g, true, self.data(*x), false, &mut gw, T::zero());
                    self.accumulate(slots, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); o];
                        for row in g.chunks_exact(o) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        self.accumulate(slots, *b, gb);
                    }
                }
            }
            Op::Bmm { a, b, ta, tb, dims } => {
                let [gn, m, k, n] = *dims;
                let (da, db) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); gn * m * k];
                    for i in 0..gn {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &db[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if *ta {
                            T::gemm(k, n, m, bi, *tb, gi, true, out, T::zero());
                        } else {
                            T::gemm(m, n, k, gi, false, bi, !*tb, out, T::zero());
                        }
                    }
                    self.accumulate(slots, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); gn * k * n];
                    for i in 0..gn {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *tb {
                            T::gemm(n, m, k, gi, true, ai, *ta, out, T::zero());
                        } else {
                            T::gemm(k, m, n, ai, !*ta, gi, false, out, T::zero());
                        }
                    }
                    self.accumulate(slots, *b, gb);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.data(*x),
                    self.data(*w),
                    g,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(slots, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(slots, *w, dw);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).numel()];
                    for (&idx, &gi) in argmax.iter().zip(g) {
                        gx[idx] += gi;
                    }
                    self.accumulate(slots, *x, gx);
                }
            }
            Op::Upsample2x(x) => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let gx = kernels::upsample2x_backward(g, xs[0] * xs[1], xs[2], xs[3]);
                    self.accumulate(slots, *x, gx);
                }
            }
            Op::SoftmaxLast(x) => {
                if self.wants(*x) {
                    let n = *self.shape(*x).last().expect("nonscalar");
                    let mut gx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks_exact(n).zip(y.chunks_exact(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        gx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
                    }
                    self.accumulate(slots, *x, gx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, inner) = channel_layout(self.shape(*x));
                let gd = self.data(*gamma);
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for (i, &gi) in g.iter().enumerate() {
                    let ci = (i / inner) % c;
                    ggamma[ci] += gi * xhat[i];
                    gbeta[ci] += gi;
                }
                if self.wants(*x) {
                    // dx = γ·inv/n · (n·g − Σg − x̂·Σ(g·x̂))
                    let nf = T::of((b * inner) as f64);
                    let mut gx = Vec::with_capacity(g.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let ci = (i / inner) % c;
                        let v = gd[ci] * inv_std[ci] / nf
                            * (nf * gi - gbeta[ci] - xhat[i] * ggamma[ci]);
                        gx.push(v);
                    }
                    self.accumulate(slots, *x, gx);
                }
                self.accumulate(slots, *gamma, ggamma);
                self.accumulate(slots, *beta, gbeta);
            }
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (_, c, inner) = channel_layout(self.shape(*x));
                let gd = self.data(*gamma);
                self.elementwise(slots, *x, g, |i, gi| {
                    let ci = (i / inner) % c;
                    gi * gd[ci] * inv_std[ci]
                });
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for (i, &gi) in g.iter().enumerate() {
                    let ci = (i / inner) % c;
                    ggamma[ci] += gi * xhat[i];
                    gbeta[ci] += gi;
                }
                self.accumulate(slots, *gamma, ggamma);
                self.accumulate(slots, *beta, gbeta);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let k = self.shape(*logits)[1];
                    let scale = g[0] / T::of(targets.len() as f64);
                    let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (row, &t) in gx.chunks_exact_mut(k).zip(targets) {
                        row[t] = row[t] - scale;
                    }
                    self.accumulate(slots, *logits, gx);
                }
            }
        }
    }

    fn elementwise_fill(&self, slots: &mut [Option<Tensor<T>>], x: Var, v: T) {
        if self.wants(x) {
            self.accumulate(slots, x, vec![v; self.value(x).numel()]);
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}
