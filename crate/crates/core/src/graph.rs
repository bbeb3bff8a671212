//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already topologically sorted. `backward` walks it once in
//! reverse. Nodes built only from constants are not tracked and receive no
//! gradient. ReLU uses a subgradient of 0 at the kink, and so do the norm
//! and distance ops at zero.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumItems(Var),
    Dot(Var, Var),
    L2Norm(Var),
    Reshape(Var),
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, size: usize, stride: usize },
    Crop { input: Var, y0: usize, x0: usize },
    Unfold { input: Var, size: usize, stride: usize },
    Channel { input: Var, c: usize },
    Row { input: Var, i: usize },
    PairDist { input: Var },
    Min { input: Var, idx: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Unordered pairs (i, j), i < j, in lexicographic order.
pub fn pair_indices(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push((i, j));
        }
    }
    out
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn pool_out(h: usize, size: usize, stride: usize) -> usize {
    (h - size) / stride + 1
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: &[Var]) -> bool {
        v.iter().any(|x| self.nodes[x.0].tracked)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a tracked leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !suffix_broadcast(ta.shape(), tb.shape()) {
            return shape_err(name, format!("{:?} with {:?}", ta.shape(), tb.shape()));
        }
        let m = tb.len();
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, tb.data()[i % m])).collect();
        Tensor::new(ta.shape(), data)
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), tr))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), tr))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).scaled(c);
        let tr = self.tracked(&[a]);
        self.push(t, Op::Scale(a, c), tr)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let tr = self.tracked(&[a]);
        self.push(t, Op::Relu(a), tr)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let tr = self.tracked(&[a]);
        self.push(t, Op::Square(a), tr)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tr = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tr)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let tr = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), tr)
    }

    /// Sum over every axis but the first: [B, ...] -> [B].
    pub fn sum_items(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let Some(&b) = v.shape().first() else {
            return shape_err("sum_items", "scalar input");
        };
        let inner = v.len().checked_div(b).unwrap_or(0);
        let data = (0..b).map(|i| v.data()[i * inner..(i + 1) * inner].iter().sum()).collect();
        let tr = self.tracked(&[a]);
        Ok(self.push(Tensor::new(&[b], data)?, Op::SumItems(a), tr))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("dot", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let s = ta.dot(tb);
        let tr = self.tracked(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), tr))
    }

    pub fn l2norm(&mut self, a: Var) -> Var {
        let s = self.value(a).norm();
        let tr = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::L2Norm(a), tr)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let tr = self.tracked(&[a]);
        Ok(self.push(t, Op::Reshape(a), tr))
    }

    /// Cross-correlation of [B,C,H,W] input with a [K,C,h,w] kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return shape_err("conv2d", format!("expected 4-d input and kernel, got {xs:?} and {ks:?}"));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return shape_err("conv2d", format!("input has {c} channels, kernel expects {kc}"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [k] {
                return shape_err("conv2d", format!("bias shape {:?}, expected [{k}]", self.shape(bv)));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let bias_data = bias.map(|bv| self.value(bv).data());
        let mut out = vec![0.0; b * k * oh * ow];
        for bi in 0..b {
            for ki in 0..k {
                let o = &mut out[(bi * k + ki) * oh * ow..(bi * k + ki + 1) * oh * ow];
                if let Some(bd) = bias_data {
                    o.iter_mut().for_each(|v| *v = bd[ki]);
                }
                for ci in 0..c {
                    let xc = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    let wc = &wt[(ki * c + ci) * kh * kw..(ki * c + ci + 1) * kh * kw];
                    for i in 0..kh {
                        for oy in 0..oh {
                            let iy = (oy * stride + i) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &xc[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut o[oy * ow..(oy + 1) * ow];
                            for j in 0..kw {
                                let wv = wc[i * kw + j];
                                for (ox, ov) in orow.iter_mut().enumerate() {
                                    let ix = (ox * stride + j) as isize - padding as isize;
                                    if ix >= 0 && ix < w as isize {
                                        *ov += wv * row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let tr = self.tracked(&deps);
        Ok(self.push(Tensor::new(&[b, k, oh, ow], out)?, Op::Conv2d { input, kernel, bias, stride, padding }, tr))
    }

    /// Max or average pooling over square windows, no padding.
    pub fn pool2d(&mut self, input: Var, kind: PoolKind, size: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || size == 0 || stride == 0 || size > xs[2] || size > xs[3] {
            return shape_err("pool2d", format!("window {size} stride {stride} on {xs:?}"));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (pool_out(h, size, stride), pool_out(w, size, stride));
        let x = self.value(input).data();
        let mut out = vec![0.0; b * c * oh * ow];
        let mut argmax = Vec::new();
        for p in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    let mut acc = 0.0;
                    for i in 0..size {
                        for j in 0..size {
                            let idx = p * h * w + (oy * stride + i) * w + ox * stride + j;
                            acc += x[idx];
                            if x[idx] > best {
                                best = x[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    match kind {
                        PoolKind::Max => {
                            out[o] = best;
                            argmax.push(best_i);
                        }
                        PoolKind::Avg => out[o] = acc / (size * size) as f64,
                    }
                }
            }
        }
        let tr = self.tracked(&[input]);
        let op = match kind {
            PoolKind::Max => Op::MaxPool { input, argmax },
            PoolKind::Avg => Op::AvgPool { input, size, stride },
        };
        Ok(self.push(Tensor::new(&[b, c, oh, ow], out)?, op, tr))
    }

    /// Spatial window [y0..y0+h, x0..x0+w] of a [B,C,H,W] tensor.
    pub fn crop(&mut self, input: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || y0 + h > xs[2] || x0 + w > xs[3] {
            return shape_err("crop", format!("window ({y0},{x0}) {h}x{w} outside {xs:?}"));
        }
        let (b, c, hh, ww) = (xs[0], xs[1], xs[2], xs[3]);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * h * w);
        for p in 0..b * c {
            for y in 0..h {
                let s = p * hh * ww + (y0 + y) * ww + x0;
                out.extend_from_slice(&x[s..s + w]);
            }
        }
        let tr = self.tracked(&[input]);
        Ok(self.push(Tensor::new(&[b, c, h, w], out)?, Op::Crop { input, y0, x0 }, tr))
    }

    /// All `size`x`size` crops of a [1,C,H,W] tensor at the given stride,
    /// row-major over crop positions: [N,C,size,size].
    pub fn unfold(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || xs[0] != 1 || size == 0 || stride == 0 || size > xs[2] || size > xs[3] {
            return shape_err("unfold", format!("crop {size} stride {stride} on {xs:?}"));
        }
        let (c, h, w) = (xs[1], xs[2], xs[3]);
        let (ny, nx) = (pool_out(h, size, stride), pool_out(w, size, stride));
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(ny * nx * c * size * size);
        for cy in 0..ny {
            for cx in 0..nx {
                for ci in 0..c {
                    for y in 0..size {
                        let s = ci * h * w + (cy * stride + y) * w + cx * stride;
                        out.extend_from_slice(&x[s..s + size]);
                    }
                }
            }
        }
        let tr = self.tracked(&[input]);
        Ok(self.push(Tensor::new(&[ny * nx, c, size, size], out)?, Op::Unfold { input, size, stride }, tr))
    }

    /// Channel `c` of a [B,K,H,W] tensor as [B,1,H,W].
    pub fn channel(&mut self, input: Var, c: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || c >= xs[1] {
            return shape_err("channel", format!("channel {c} of {xs:?}"));
        }
        let (b, k, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * hw);
        for bi in 0..b {
            out.extend_from_slice(&x[(bi * k + c) * hw..(bi * k + c + 1) * hw]);
        }
        let tr = self.tracked(&[input]);
        Ok(self.push(Tensor::new(&[b, 1, xs[2], xs[3]], out)?, Op::Channel { input, c }, tr))
    }

    /// Item `i` along the leading axis.
    pub fn row(&mut self, input: Var, i: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.is_empty() || i >= xs[0] {
            return shape_err("row", format!("row {i} of {xs:?}"));
        }
        let inner = self.value(input).len() / xs[0];
        let data = self.value(input).data()[i * inner..(i + 1) * inner].to_vec();
        let tr = self.tracked(&[input]);
        Ok(self.push(Tensor::new(&xs[1..], data)?, Op::Row { input, i }, tr))
    }

    /// Euclidean distances between all row pairs of a [B,F] tensor, ordered as
    /// [`pair_indices`].
    pub fn pairwise_distances(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 2 {
            return shape_err("pairwise_distances", format!("expected [B,F], got {xs:?}"));
        }
        let (b, f) = (xs[0], xs[1]);
        let x = self.value(input).data();
        let pairs = pair_indices(b);
        let data: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                let (ri, rj) = (&x[i * f..(i + 1) * f], &x[j * f..(j + 1) * f]);
                ri.iter().zip(rj).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
            })
            .collect();
        let tr = self.tracked(&[input]);
        Ok(self.push(Tensor::new(&[pairs.len()], data)?, Op::PairDist { input }, tr))
    }

    /// Minimum entry; the gradient flows to the first minimizer only.
    pub fn min(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        if v.is_empty() {
            return shape_err("min", "empty input");
        }
        let mut idx = 0;
        for (i, &x) in v.data().iter().enumerate() {
            if x < v.data()[idx] {
                idx = i;
            }
        }
        let m = v.data()[idx];
        let tr = self.tracked(&[input]);
        Ok(self.push(Tensor::scalar(m), Op::Min { input, idx }, tr))
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into tracked
    /// leaves across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(go) = grads[id].take() else { continue };
            if !self.nodes[id].tracked {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let n = &mut self.nodes[id];
                match &mut n.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&go).for_each(|(a, b)| *a += b),
                    None => n.grad = Some(Tensor::new(n.value.shape(), go)?),
                }
                continue;
            }
            let node = &self.nodes[id];
            let nodes = &self.nodes;
            let send = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, g: Vec<f64>| {
                if !nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            };
            let val = |v: Var| nodes[v.0].value.data();
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let m = val(b).len();
                    let mut gb = vec![0.0; m];
                    for (i, g) in go.iter().enumerate() {
                        gb[i % m] += sign * g;
                    }
                    send(&mut grads, b, gb);
                    send(&mut grads, a, go);
                }
                Op::Mul(a, b) => {
                    let (xa, xb) = (val(a), val(b));
                    let m = xb.len();
                    let mut gb = vec![0.0; m];
                    let mut ga = vec![0.0; go.len()];
                    for (i, g) in go.iter().enumerate() {
                        ga[i] = g * xb[i % m];
                        gb[i % m] += g * xa[i];
                    }
                    send(&mut grads, a, ga);
                    send(&mut grads, b, gb);
                }
                Op::Scale(a, c) => send(&mut grads, a, go.iter().map(|g| g * c).collect()),
                Op::Relu(a) => {
                    let g = val(a).iter().zip(&go).map(|(&x, g)| if x > 0.0 { *g } else { 0.0 }).collect();
                    send(&mut grads, a, g);
                }
                Op::Square(a) => {
                    let g = val(a).iter().zip(&go).map(|(x, g)| 2.0 * x * g).collect();
                    send(&mut grads, a, g);
                }
                Op::Sum(a) => send(&mut grads, a, vec![go[0]; val(a).len()]),
                Op::Mean(a) => {
                    let n = val(a).len();
                    send(&mut grads, a, vec![go[0] / n as f64; n]);
                }
                Op::SumItems(a) => {
                    let n = val(a).len();
                    let inner = n / go.len().max(1);
                    send(&mut grads, a, (0..n).map(|i| go[i / inner]).collect());
                }
                Op::Dot(a, b) => {
                    let (xa, xb) = (val(a), val(b));
                    send(&mut grads, a, xb.iter().map(|x| x * go[0]).collect());
                    send(&mut grads, b, xa.iter().map(|x| x * go[0]).collect());
                }
                Op::L2Norm(a) => {
                    let n = node.value.item();
                    let g = if n > 0.0 { val(a).iter().map(|x| x / n * go[0]).collect() } else { vec![0.0; val(a).len()] };
                    send(&mut grads, a, g);
                }
                Op::Reshape(a) => send(&mut grads, a, go),
                Op::Conv2d { input, kernel, bias, stride, padding } => {
                    let (xs, ks) = (nodes[input.0].value.shape(), nodes[kernel.0].value.shape());
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (k, kh, kw) = (ks[0], ks[2], ks[3]);
                    let os = node.value.shape();
                    let (oh, ow) = (os[2], os[3]);
                    let (x, wt) = (val(input), val(kernel));
                    let need_x = nodes[input.0].tracked;
                    let need_w = nodes[kernel.0].tracked;
                    let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
                    let mut gw = if need_w { vec![0.0; wt.len()] } else { Vec::new() };
                    for bi in 0..b {
                        for ki in 0..k {
                            let o = &go[(bi * k + ki) * oh * ow..(bi * k + ki + 1) * oh * ow];
                            for ci in 0..c {
                                let xoff = (bi * c + ci) * h * w;
                                let woff = (ki * c + ci) * kh * kw;
                                for i in 0..kh {
                                    for oy in 0..oh {
                                        let iy = (oy * stride + i) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let rbase = xoff + iy as usize * w;
                                        for j in 0..kw {
                                            let widx = woff + i * kw + j;
                                            let wv = wt[widx];
                                            let mut acc_w = 0.0;
                                            for ox in 0..ow {
                                                let ix = (ox * stride + j) as isize - padding as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let gov = o[oy * ow + ox];
                                                let xi = rbase + ix as usize;
                                                if need_x {
                                                    gx[xi] += gov * wv;
                                                }
                                                acc_w += gov * x[xi];
                                            }
                                            if need_w {
                                                gw[widx] += acc_w;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(bv) = bias {
                        let mut gb = vec![0.0; k];
                        for bi in 0..b {
                            for (ki, g) in gb.iter_mut().enumerate() {
                                *g += go[(bi * k + ki) * oh * ow..(bi * k + ki + 1) * oh * ow].iter().sum::<f64>();
                            }
                        }
                        send(&mut grads, bv, gb);
                    }
                    if need_x {
                        send(&mut grads, input, gx);
                    }
                    if need_w {
                        send(&mut grads, kernel, gw);
                    }
                }
                Op::MaxPool { input, ref argmax } => {
                    let mut g = vec![0.0; val(input).len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        g[src] += go[o];
                    }
                    send(&mut grads, input, g);
                }
                Op::AvgPool { input, size, stride } => {
                    let xs = nodes[input.0].value.shape();
                    let (h, w) = (xs[2], xs[3]);
                    let os = node.value.shape();
                    let (oh, ow) = (os[2], os[3]);
                    let inv = 1.0 / (size * size) as f64;
                    let mut g = vec![0.0; val(input).len()];
                    for p in 0..xs[0] * xs[1] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = go[p * oh * ow + oy * ow + ox] * inv;
                                for i in 0..size {
                                    for j in 0..size {
                                        g[p * h * w + (oy * stride + i) * w + ox * stride + j] += gv;
                                    }
                                }
                            }
                        }
                    }
                    send(&mut grads, input, g);
                }
                Op::Crop { input, y0, x0 } => {
                    let xs = nodes[input.0].value.shape();
                    let (hh, ww) = (xs[2], xs[3]);
                    let os = node.value.shape();
                    let (h, w) = (os[2], os[3]);
                    let mut g = vec![0.0; val(input).len()];
                    for p in 0..os[0] * os[1] {
                        for y in 0..h {
                            let s = p * hh * ww + (y0 + y) * ww + x0;
                            for x in 0..w {
                                g[s + x] += go[(p * h + y) * w + x];
                            }
                        }
                    }
                    send(&mut grads, input, g);
                }
                Op::Unfold { input, size, stride } => {
                    let xs = nodes[input.0].value.shape();
                    let (c, h, w) = (xs[1], xs[2], xs[3]);
                    let (_, nx) = (pool_out(h, size, stride), pool_out(w, size, stride));
                    let mut g = vec![0.0; val(input).len()];
                    let per = c * size * size;
                    for n in 0..node.value.shape()[0] {
                        let (cy, cx) = (n / nx, n % nx);
                        for ci in 0..c {
                            for y in 0..size {
                                let s = ci * h * w + (cy * stride + y) * w + cx * stride;
                                let src = n * per + (ci * size + y) * size;
                                for x in 0..size {
                                    g[s + x] += go[src + x];
                                }
                            }
                        }
                    }
                    send(&mut grads, input, g);
                }
                Op::Channel { input, c } => {
                    let xs = nodes[input.0].value.shape();
                    let (b, k, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut g = vec![0.0; val(input).len()];
                    for bi in 0..b {
                        g[(bi * k + c) * hw..(bi * k + c + 1) * hw].copy_from_slice(&go[bi * hw..(bi + 1) * hw]);
                    }
                    send(&mut grads, input, g);
                }
                Op::Row { input, i } => {
                    let n = val(input).len();
                    let inner = go.len();
                    let mut g = vec![0.0; n];
                    g[i * inner..(i + 1) * inner].copy_from_slice(&go);
                    send(&mut grads, input, g);
                }
                Op::PairDist { input } => {
                    let xs = nodes[input.0].value.shape();
                    let (b, f) = (xs[0], xs[1]);
                    let x = val(input);
                    let d = node.value.data();
                    let mut g = vec![0.0; x.len()];
                    for (p, &(i, j)) in pair_indices(b).iter().enumerate() {
                        if d[p] <= 0.0 || go[p] == 0.0 {
                            continue;
                        }
                        let s = go[p] / d[p];
                        for q in 0..f {
                            let diff = (x[i * f + q] - x[j * f + q]) * s;
                            g[i * f + q] += diff;
                            g[j * f + q] -= diff;
                        }
                    }
                    send(&mut grads, input, g);
                }
                Op::Min { input, idx } => {
                    let mut g = vec![0.0; val(input).len()];
                    g[idx] = go[0];
                    send(&mut grads, input, g);
                }
            }
        }
        Ok(())
    }
}
