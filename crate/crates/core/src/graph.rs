//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every forward call appends a node holding its output value plus whatever
//! it needs for the backward pass. `backward` walks the tape once in reverse.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm, Mat};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Batch-norm behaviour: batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-feature batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

#[derive(Clone, Copy, Debug)]
struct PoolGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

enum Op {
    Leaf,
    Param(String),
    Affine { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: PoolGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The forward tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, layer: &'static str) -> Result<Var> {
        value.check_finite(layer)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant with no gradient routed anywhere.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Binds parameter `name` of `ps`. Untracked parameters act as constants.
    pub fn param(&mut self, ps: &ParameterSet, name: &str, track: bool) -> Result<Var> {
        let t = ps.get(name)?.clone();
        let op = if track { Op::Param(String::from(name)) } else { Op::Leaf };
        self.nodes.push(Node { value: t, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `x [N, in] * w[out, in]^T + b[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(shape_err(
                "affine",
                format!("input {:?}, weight {:?}, bias {:?}", xs, ws, bs),
            ));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            1.0,
            Mat::new(self.value(x).data(), n, din),
            Mat::new(self.value(w).data(), dout, din).t(),
            1.0,
            &mut out,
        );
        self.push(Tensor::new(&[n, dout], out)?, Op::Affine { x, w, b }, "affine")
    }

    /// 2-D convolution with zero padding. `x [N,Cin,H,W]`, `w [Cout,Cin,kh,kw]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}, bias {:?}", xs, ws, bs),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1"));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", format!("kernel {}x{} larger than padded input", kh, kw)));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (k, p) = (geom.k(), geom.p());
        let mut cols = vec![0.0; n * k * p];
        let mut out = vec![0.0; n * cout * p];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let bdat = self.value(b).data();
        for s in 0..n {
            let img = &xd[s * cin * h * wd..(s + 1) * cin * h * wd];
            let c = &mut cols[s * k * p..(s + 1) * k * p];
            im2col(img, &geom, c);
            let o = &mut out[s * cout * p..(s + 1) * cout * p];
            for (oc, plane) in o.chunks_exact_mut(p).enumerate() {
                plane.fill(bdat[oc]);
            }
            gemm(1.0, Mat::new(wdat, cout, k), Mat::new(c, k, p), 1.0, o);
        }
        let value = Tensor::new(&[n, cout, geom.oh, geom.ow], out)?;
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, "conv2d")
    }

    fn pool_geom(&self, x: Var, k: usize, stride: usize, layer: &'static str) -> Result<PoolGeom> {
        let xs = self.shape(x);
        if xs.len() != 4 || k == 0 || stride == 0 || xs[2] < k || xs[3] < k {
            return Err(shape_err(layer, format!("input {:?}, kernel {}, stride {}", xs, k, stride)));
        }
        Ok(PoolGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            oh: (xs[2] - k) / stride + 1,
            ow: (xs[3] - k) / stride + 1,
        })
    }

    /// Max pooling without padding.
    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let g = self.pool_geom(x, k, stride, "max_pool")?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..g.n * g.c {
            let base = plane * g.h * g.w;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = base + (oy * stride + ky) * g.w + ox * stride + kx;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let value = Tensor::new(&[g.n, g.c, g.oh, g.ow], out)?;
        self.push(value, Op::MaxPool { x, argmax }, "max_pool")
    }

    /// Average pooling without padding.
    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let g = self.pool_geom(x, k, stride, "avg_pool")?;
        let xd = self.value(x).data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
        for plane in 0..g.n * g.c {
            let base = plane * g.h * g.w;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let row = base + (oy * stride + ky) * g.w + ox * stride;
                        acc += xd[row..row + k].iter().sum::<f64>();
                    }
                    out.push(acc * inv);
                }
            }
        }
        let value = Tensor::new(&[g.n, g.c, g.oh, g.ow], out)?;
        self.push(value, Op::AvgPool { x, geom: g }, "avg_pool")
    }

    /// Batch normalization over axis 1 of `[N, F]` or `[N, C, H, W]` inputs.
    ///
    /// In [`BnMode::Train`] the batch statistics are used and returned so the
    /// caller can fold them into running statistics. In [`BnMode::Eval`]
    /// `running = (mean, var)` must be supplied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: Option<(&Tensor, &Tensor)>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batch_norm", format!("input {:?}", xs)));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!("{} features, gamma {:?}, beta {:?}", c, self.shape(gamma), self.shape(beta)),
            ));
        }
        let m = (n * inner) as f64;
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            BnMode::Train => {
                if n * inner < 2 {
                    return Err(shape_err("batch_norm", "training mode needs more than one value per feature"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for (ch, mu) in mean.iter_mut().enumerate() {
                        let off = (s * c + ch) * inner;
                        *mu += xd[off..off + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        var[ch] += xd[off..off + inner].iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var)
            }
            BnMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| shape_err("batch_norm", "eval mode needs running statistics"))?;
                if rm.shape() != [c] || rv.shape() != [c] {
                    return Err(shape_err("batch_norm", "running statistics shape"));
                }
                (rm.data().to_vec(), rv.data().to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        let train = mode == BnMode::Train;
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, "batch_norm")?;
        Ok((v, if train { Some(BatchStats { mean, var }) } else { None }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| libm::tanh(v)).collect();
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, Op::Tanh(x), "tanh")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, Op::Softmax(x), "softmax")
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(shape_err("concat", format!("input {:?}", s0)));
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut total_c = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len() || s[0] != n || s[2..] != s0[2..] {
                return Err(shape_err("concat", format!("{:?} vs {:?}", s, s0)));
            }
            total_c += s[1];
        }
        let mut out = Vec::with_capacity(n * total_c * inner);
        for s in 0..n {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[s * block..(s + 1) * block]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total_c;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Concat(parts.to_vec()), "concat")
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("input {:?}", xs)));
        }
        let inner = xs[2] * xs[3];
        let data = self
            .value(x)
            .data()
            .chunks_exact(inner)
            .map(|p| p.iter().sum::<f64>() / inner as f64)
            .collect();
        let value = Tensor::new(&[xs[0], xs[1]], data)?;
        self.push(value, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    fn binary(&mut self, a: Var, b: Var, layer: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(layer, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(av.shape(), av.data().iter().map(|v| v * c).collect())?;
        self.push(t, Op::Scale(a, c), "scale")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(av.shape(), av.data().iter().map(|v| v * v).collect())?;
        self.push(t, Op::Square(a), "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    ///
    /// `logits` is `[N, C]` (or `[C]` for a single example).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let (n, c) = match ls.as_slice() {
            [c] => (1, *c),
            [n, c] => (*n, *c),
            _ => return Err(shape_err("cross_entropy", format!("logits {:?}", ls))),
        };
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels for batch of {}", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_exact_mut(c).zip(labels) {
            loss += log_sum_exp(row) - row[y];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, "cross_entropy")
    }

    /// Reverse pass from a one-element `loss`. Callable once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "loss must have exactly one element"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let (n, dout) = (node.value.shape()[0], node.value.shape()[1]);
                    let din = self.shape(*x)[1];
                    let mut dx = vec![0.0; n * din];
                    gemm(1.0, Mat::new(dy.data(), n, dout), Mat::new(self.value(*w).data(), dout, din), 0.0, &mut dx);
                    let mut dw = vec![0.0; dout * din];
                    gemm(1.0, Mat::new(dy.data(), n, dout).t(), Mat::new(self.value(*x).data(), n, din), 0.0, &mut dw);
                    let mut db = vec![0.0; dout];
                    for row in dy.data().chunks_exact(dout) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let (k, p) = (geom.k(), geom.p());
                    let wdat = self.value(*w).data();
                    let mut dw = vec![0.0; geom.cout * k];
                    let mut db = vec![0.0; geom.cout];
                    let mut dx = vec![0.0; geom.n * geom.cin * geom.h * geom.w];
                    let mut dcols = vec![0.0; k * p];
                    for s in 0..geom.n {
                        let dys = &dy.data()[s * geom.cout * p..(s + 1) * geom.cout * p];
                        let cs = &cols[s * k * p..(s + 1) * k * p];
                        gemm(1.0, Mat::new(dys, geom.cout, p), Mat::new(cs, k, p).t(), 1.0, &mut dw);
                        for (oc, plane) in dys.chunks_exact(p).enumerate() {
                            db[oc] += plane.iter().sum::<f64>();
                        }
                        gemm(1.0, Mat::new(wdat, geom.cout, k).t(), Mat::new(dys, geom.cout, p), 0.0, &mut dcols);
                        let img = geom.cin * geom.h * geom.w;
                        col2im(&dcols, geom, &mut dx[s * img..(s + 1) * img]);
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (g, &src) in dy.data().iter().zip(argmax) {
                        dx[src] += g;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool { x, geom: g } => {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    let inv = 1.0 / (g.k * g.k) as f64;
                    let mut it = dy.data().iter();
                    for plane in 0..g.n * g.c {
                        let base = plane * g.h * g.w;
                        for oy in 0..g.oh {
                            for ox in 0..g.ow {
                                let gv = it.next().copied().unwrap_or(0.0) * inv;
                                for ky in 0..g.k {
                                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                                    dx[row..row + g.k].iter_mut().for_each(|d| *d += gv);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let m = (n * inner) as f64;
                    let gd = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let dyd = dy.data();
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * inner;
                            for i in off..off + inner {
                                dgamma[ch] += dyd[i] * xhat[i];
                                dbeta[ch] += dyd[i];
                            }
                        }
                    }
                    let mut dx = vec![0.0; dyd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * inner;
                            for i in off..off + inner {
                                dx[i] = if *train {
                                    // d xhat = dy * gamma; sums of d xhat are gamma * (dbeta, dgamma).
                                    gd[ch] * inv_std[ch] / m * (m * dyd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gd[ch] * inv_std[ch] * dyd[i]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Relu(x) => {
                    let dx = dy
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = dy.data().iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let c = *node.value.shape().last().unwrap_or(&1);
                    let mut dx = Vec::with_capacity(dy.len());
                    for (g, y) in dy.data().chunks_exact(c).zip(node.value.data().chunks_exact(c)) {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        dx.extend(g.iter().zip(y).map(|(gi, yi)| yi * (gi - dot)));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let s0 = node.value.shape();
                    let n = s0[0];
                    let inner: usize = s0[2..].iter().product();
                    let total = s0[1] * inner;
                    let mut offset = 0;
                    for p in parts {
                        let block = self.shape(*p)[1] * inner;
                        let mut dp = Vec::with_capacity(n * block);
                        for s in 0..n {
                            dp.extend_from_slice(&dy.data()[s * total + offset..s * total + offset + block]);
                        }
                        offset += block;
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let xs = self.shape(*x);
                    let inner = xs[2] * xs[3];
                    let mut dx = Vec::with_capacity(self.value(*x).len());
                    for g in dy.data() {
                        let v = g / inner as f64;
                        dx.extend(core::iter::repeat(v).take(inner));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.data().to_vec());
                    accumulate(&mut grads, *b, dy.into_data());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, dy.data().iter().map(|g| -g).collect());
                    accumulate(&mut grads, *a, dy.into_data());
                }
                Op::Mul(a, b) => {
                    let da = dy.data().iter().zip(self.value(*b).data()).map(|(g, v)| g * v).collect();
                    let db = dy.data().iter().zip(self.value(*a).data()).map(|(g, v)| g * v).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, dy.data().iter().map(|g| g * c).collect());
                }
                Op::Square(a) => {
                    let da = dy.data().iter().zip(self.value(*a).data()).map(|(g, v)| 2.0 * g * v).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let g = dy.data()[0];
                    accumulate(&mut grads, *a, vec![g; self.value(*a).len()]);
                }
                Op::Mean(a) => {
                    let len = self.value(*a).len();
                    let g = dy.data()[0] / len as f64;
                    accumulate(&mut grads, *a, vec![g; len]);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let g = dy.data()[0] / n as f64;
                    let mut dl = probs.clone();
                    for (row, &y) in dl.chunks_exact_mut(c).zip(labels) {
                        row[y] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= g);
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }

        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut out = Vec::with_capacity(grads.len());
        for (g, shape) in grads.into_iter().zip(shapes) {
            out.push(match g {
                Some(t) if t.shape() != shape.as_slice() => Some(t.reshape(&shape)?),
                other => other,
            });
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => t.data_mut().iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => {
            let len = delta.len();
            // Shape is restored from the node at the end of `backward`.
            *slot = Some(Tensor::new(&[len], delta).expect("flat gradient"));
        }
    }
}

fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.p();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let p = g.p();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let srcr = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            img[base + ix as usize] += srcr[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>())
}

/// Numerically stable softmax (max subtracted first).
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - m);
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Output of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node on the tape.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Routes every tracked gradient to whichever of `a` or `b` owns the name.
    pub fn accumulate_into_split(&self, a: &mut ParameterSet, b: &mut ParameterSet) -> Result<()> {
        for (name, v) in &self.params {
            let owner = match (a.get(name).is_ok(), b.get(name).is_ok()) {
                (true, false) => &mut *a,
                (false, true) => &mut *b,
                (true, true) => return Err(Error::DuplicateParameter(name.clone())),
                (false, false) => return Err(Error::UnknownParameter(name.clone())),
            };
            match self.get(*v) {
                Some(g) => owner.accumulate_grad(name, g)?,
                None => {
                    let zero = Tensor::zeros(owner.get(name)?.shape());
                    owner.accumulate_grad(name, &zero)?
                }
            }
        }
        Ok(())
    }

    /// Adds the gradients of every tracked parameter into `ps`.
    pub fn accumulate_into(&self, ps: &mut ParameterSet) -> Result<()> {
        for (name, v) in &self.params {
            match self.get(*v) {
                Some(g) => ps.accumulate_grad(name, g)?,
                None => ps.accumulate_grad(name, &Tensor::zeros(ps.get(name)?.shape()))?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::boxed::Box;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

    /// Weighted sum of the output so every element carries a distinct gradient.
    fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(g.value(out).shape(), 1.0, &mut rng);
        let w = g.input(w);
        let p = g.mul(out, w)?;
        g.sum(p)
    }

    fn eval(inputs: &[Tensor], build: &Build) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.value(loss).item().unwrap()
    }

    /// Central differences with step 1e-5 against the tape, relative error
    /// `|a - n| / max(|a|, |n|, 1e-4)`.
    fn check(inputs: &[Tensor], build: &Build) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars).unwrap();
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        worst
    }

    fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    fn assert_grad(name: &str, trials: usize, make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)) {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for trial in 0..trials {
            let (inputs, build) = make(&mut rng);
            let err = check(&inputs, build.as_ref());
            assert!(err < 1e-4, "{} trial {}: relative error {}", name, trial, err);
        }
    }

    #[test]
    fn examples() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let w = g.input(eye);
        let b = g.input(Tensor::zeros(&[3]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        let r = g.input(Tensor::from_slice(&[-1.0, 0.0, 2.0]));
        let r = g.relu(r).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let c = g.input(Tensor::full(&[1, 3, 6, 6], 0.37));
        let p = g.avg_pool(c, 3, 3).unwrap();
        assert!(g.value(p).data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = |logits: &[f64], y: usize| {
            let mut g = Graph::new();
            let l = g.input(Tensor::from_slice(logits));
            let loss = g.cross_entropy(l, &[y]).unwrap();
            g.value(loss).item().unwrap()
        };
        assert!((ce(&[0.3; 10], 4) - 10f64.ln()).abs() < 1e-12);
        let mut m = [0.0; 10];
        m[2] = 50.0;
        assert!(ce(&m, 2) < 1e-20);
        let oracle = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((ce(&[1.0, 0.0], 0) - oracle).abs() < 1e-12);
        assert!((oracle - 0.313262).abs() < 1e-6);

        let mut g = Graph::new();
        let l = g.input(Tensor::from_slice(&[1.0, 0.0]));
        assert_eq!(g.cross_entropy(l, &[2]), Err(Error::LabelOutOfRange { label: 2, classes: 2 }));
    }

    #[test]
    fn backward_examples() {
        let mut ps = ParameterSet::new();
        ps.insert("p", Tensor::from_slice(&[0.5, -2.0, 3.0])).unwrap();
        let mut g = Graph::new();
        let p = g.param(&ps, "p", true).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        grads.accumulate_into(&mut ps).unwrap();
        assert_eq!(ps.grad("p").unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.backward(s).err(), Some(Error::TapeConsumed));

        let mut g = Graph::new();
        let p = g.param(&ps, "p", true).unwrap();
        let z = g.scale(p, 0.0).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        let w = g.input(Tensor::zeros(&[4, 5]));
        let b = g.input(Tensor::zeros(&[4]));
        match g.affine(x, w, b) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "affine"),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_slice(&[1e300]));
        assert!(matches!(g.square(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn grad_affine_and_two_layer_net() {
        assert_grad("affine", 10, |rng| {
            let n = rng.random_range(1..4);
            let (i, o) = (rng.random_range(1..5), rng.random_range(1..5));
            let inputs = vec![rand(&[n, i], rng), rand(&[o, i], rng), rand(&[o], rng)];
            (inputs, Box::new(|g, v| {
                let y = g.affine(v[0], v[1], v[2])?;
                project(g, y, 1)
            }))
        });
        assert_grad("two-layer", 10, |rng| {
            let inputs = vec![
                rand(&[3, 4], rng),
                rand(&[5, 4], rng),
                rand(&[5], rng),
                rand(&[2, 5], rng),
                rand(&[2], rng),
            ];
            (inputs, Box::new(|g, v| {
                let h = g.affine(v[0], v[1], v[2])?;
                let h = g.tanh(h)?;
                let y = g.affine(h, v[3], v[4])?;
                g.cross_entropy(y, &[0, 1, 1])
            }))
        });
    }

    #[test]
    fn grad_conv_and_pools() {
        assert_grad("conv2d", 6, |rng| {
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..2);
            let inputs = vec![rand(&[2, 2, 5, 5], rng), rand(&[3, 2, 3, 3], rng), rand(&[3], rng)];
            (inputs, Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
                project(g, y, 2)
            }))
        });
        assert_grad("max_pool", 6, |rng| {
            (vec![rand(&[2, 2, 4, 4], rng)], Box::new(|g, v| {
                let y = g.max_pool(v[0], 2, 2)?;
                project(g, y, 3)
            }))
        });
        assert_grad("avg_pool", 6, |rng| {
            (vec![rand(&[1, 2, 5, 5], rng)], Box::new(|g, v| {
                let y = g.avg_pool(v[0], 3, 2)?;
                project(g, y, 4)
            }))
        });
        assert_grad("global_avg_pool", 6, |rng| {
            (vec![rand(&[2, 3, 3, 2], rng)], Box::new(|g, v| {
                let y = g.global_avg_pool(v[0])?;
                project(g, y, 5)
            }))
        });
    }

    #[test]
    fn grad_batch_norm_modes() {
        assert_grad("batch_norm train", 6, |rng| {
            let inputs = vec![rand(&[4, 3], rng), rand(&[3], rng), rand(&[3], rng)];
            (inputs, Box::new(|g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Train, None)?;
                project(g, y, 6)
            }))
        });
        assert_grad("batch_norm train 4d", 4, |rng| {
            let inputs = vec![rand(&[2, 2, 2, 3], rng), rand(&[2], rng), rand(&[2], rng)];
            (inputs, Box::new(|g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Train, None)?;
                project(g, y, 7)
            }))
        });
        assert_grad("batch_norm eval", 4, |rng| {
            let inputs = vec![rand(&[3, 2], rng), rand(&[2], rng), rand(&[2], rng)];
            let rm = rand(&[2], rng);
            let rv = Tensor::from_slice(&[0.5, 2.0]);
            (inputs, Box::new(move |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Eval, Some((&rm, &rv)))?;
                project(g, y, 8)
            }))
        });
    }

    #[test]
    fn grad_pointwise_ops() {
        assert_grad("relu/tanh/softmax", 6, |rng| {
            (vec![rand(&[3, 4], rng)], Box::new(|g, v| {
                let a = g.relu(v[0])?;
                let b = g.tanh(v[0])?;
                let c = g.softmax(v[0])?;
                let s = g.add(a, b)?;
                let s = g.add(s, c)?;
                project(g, s, 9)
            }))
        });
        assert_grad("concat/sub/mul/square/mean/scale", 6, |rng| {
            (vec![rand(&[2, 3], rng), rand(&[2, 1], rng), rand(&[2, 4], rng)], Box::new(|g, v| {
                let c = g.concat(&[v[0], v[1]])?;
                let d = g.sub(c, v[2])?;
                let e = g.mul(d, c)?;
                let f = g.square(e)?;
                let f = g.scale(f, -0.3)?;
                let m = g.mean(f)?;
                let p = project(g, c, 10)?;
                g.add(m, p)
            }))
        });
    }

    #[test]
    fn batch_norm_normalizes_each_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[16, 5], 10.0, &mut rng));
        let gamma = g.input(Tensor::full(&[5], 1.0));
        let beta = g.input(Tensor::zeros(&[5]));
        let (y, stats) = g.batch_norm(x, gamma, beta, BnMode::Train, None).unwrap();
        assert!(stats.is_some());
        let y = g.value(y);
        for f in 0..5 {
            let col: Vec<f64> = (0..16).map(|i| y.data()[i * 5 + f]).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            // eps shrinks the variance by var / (var + eps), under 1e-6 for var > 10
            assert!((var - 1.0).abs() < 1e-6, "var {}", var);
        }
    }

    #[test]
    fn deterministic_outputs_and_gradients() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new();
            let x = g.input(Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng));
            let w = g.input(Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng));
            let b = g.input(Tensor::randn(&[4], 1.0, &mut rng));
            let y = g.conv2d(x, w, b, 2, 1).unwrap();
            let p = g.global_avg_pool(y).unwrap();
            let loss = g.cross_entropy(p, &[1, 3]).unwrap();
            let grads = g.backward(loss).unwrap();
            (g.value(loss).clone(), grads.get(w).unwrap().clone(), grads.get(x).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
