use super::conv::{self, ConvShape};
use super::{gemm, Real, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize> },
    Linear { x: usize, w: usize, b: Option<usize> },
    ChannelBias { x: usize, bias: usize },
    Axpby { a: usize, b: usize, ca: f64, cb: f64 },
    ScalePerSample { a: usize, s: Vec<f64> },
    Silu { a: usize },
    Mask { a: usize, mask: Vec<T> },
    Concat { parts: Vec<usize> },
    WeightedMeanSquare { a: usize, w: Vec<f64> },
    Sum { a: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// A single-use tape: build the forward pass, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf. `name` identifies it in [`Graph::param_grads`].
    pub fn param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.into());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Periodic convolution. `x: [B,Cin,H,W]`, `w: [Cout,Cin,k,k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::Shape(format!("conv2d input {xs:?} with weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::Shape(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let s = ConvShape { batch: xs[0], cin: xs[1], cout: ws[0], h: xs[2], w: xs[3], k: ws[2] };
        let out = conv::forward(
            s,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(vec![s.batch, s.cout, s.h, s.w], out)?;
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        Ok(self.push(t, Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0) }, rg))
    }

    /// `x: [B,in]`, `w: [out,in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::Shape(format!("linear input {xs:?} with weight {ws:?}")));
        }
        let (bsz, nin, nout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); bsz * nout];
        if let Some(b) = b {
            if self.shape(b) != [nout] {
                return Err(Error::Shape(format!("linear bias {:?}", self.shape(b))));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(nout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(bsz, nin, nout, self.value(x).data(), false, self.value(w).data(), true, &mut out, T::one());
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let t = Tensor::new(vec![bsz, nout], out)?;
        Ok(self.push(t, Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }, rg))
    }

    /// Add a per-sample, per-channel bias `[B,C]` to `x: [B,C,H,W]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(bias) != [xs[0], xs[1]] {
            return Err(Error::Shape(format!(
                "channel bias {:?} for {xs:?}",
                self.shape(bias)
            )));
        }
        let hw = xs[2] * xs[3];
        let bv = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let c = bv[i];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        let rg = self.rg(x.0) || self.rg(bias.0);
        Ok(self.push(Tensor::new(xs, out)?, Op::ChannelBias { x: x.0, bias: bias.0 }, rg))
    }

    /// `ca * a + cb * b`.
    pub fn axpby(&mut self, ca: f64, a: Var, cb: f64, b: Var) -> Result<Var> {
        let (ta, tb) = (T::from_f64(ca), T::from_f64(cb));
        let t = self.value(a).zip_map(self.value(b), |x, y| ta * x + tb * y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Axpby { a: a.0, b: b.0, ca, cb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.axpby(1.0, a, 1.0, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.axpby(1.0, a, -1.0, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.axpby(c, a, 0.0, a)
    }

    /// Multiply sample `b` (leading axis) by `s[b]`.
    pub fn scale_per_sample(&mut self, a: Var, s: &[f64]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.first() != Some(&s.len()) {
            return Err(Error::Shape(format!("{} scales for {shape:?}", s.len())));
        }
        let per = self.value(a).numel() / s.len().max(1);
        let mut out = self.value(a).data().to_vec();
        for (chunk, &c) in out.chunks_mut(per.max(1)).zip(s) {
            let c = T::from_f64(c);
            chunk.iter_mut().for_each(|v| *v *= c);
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScalePerSample { a: a.0, s: s.to_vec() }, rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| T::from_f64(silu(v.as_f64())));
        let rg = self.rg(a.0);
        self.push(t, Op::Silu { a: a.0 }, rg)
    }

    /// Elementwise product with a fixed mask (used for dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::Shape(format!(
                "mask of {} for {:?}",
                mask.len(),
                self.shape(a)
            )));
        }
        let shape = self.shape(a).to_vec();
        let out = self.value(a).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mask { a: a.0, mask }, rg))
    }

    /// Concatenate `[B,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?).to_vec();
        if first.len() != 4 {
            return Err(Error::Shape(format!("concat of {first:?}")));
        }
        let (b, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
                return Err(Error::Shape(format!("concat {s:?} with {first:?}")));
            }
            c_total += s[1];
        }
        let mut out = Vec::with_capacity(b * c_total * h * w);
        for bi in 0..b {
            for p in parts {
                let v = self.value(*p);
                let per = v.numel() / b;
                out.extend_from_slice(&v.data()[bi * per..(bi + 1) * per]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let t = Tensor::new(vec![b, c_total, h, w], out)?;
        Ok(self.push(t, Op::Concat { parts: parts.iter().map(|p| p.0).collect() }, rg))
    }

    /// `(1/B) sum_b w[b] * mean(a[b]^2)`, a scalar.
    pub fn weighted_mean_square(&mut self, a: Var, w: &[f64]) -> Result<Var> {
        let v = self.value(a);
        let b = v.shape().first().copied().unwrap_or(0);
        if b != w.len() || b == 0 {
            return Err(Error::Shape(format!("{} weights for {:?}", w.len(), v.shape())));
        }
        let per = v.numel() / b;
        let mut acc = 0.0;
        for (chunk, &wb) in v.data().chunks(per).zip(w) {
            let s: f64 = chunk.iter().map(|x| x.as_f64() * x.as_f64()).sum();
            acc += wb * s / per as f64;
        }
        let t = Tensor::scalar(T::from_f64(acc / b as f64));
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::WeightedMeanSquare { a: a.0, w: w.to_vec() }, rg))
    }

    /// Mean of squares over every element.
    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let b = self.shape(a).first().copied().unwrap_or(0);
        self.weighted_mean_square(a, &vec![1.0; b])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { a: a.0 }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called before any forward pass".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let acc = |j: usize, d: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[j].requires_grad {
                    return;
                }
                match grads[j].as_mut() {
                    Some(e) => e.iter_mut().zip(&d).for_each(|(a, b)| *a += *b),
                    None => grads[j] = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b } => {
                    let xs = self.nodes[*x].value.shape();
                    let ws = self.nodes[*w].value.shape();
                    let s = ConvShape { batch: xs[0], cin: xs[1], cout: ws[0], h: xs[2], w: xs[3], k: ws[2] };
                    let cg = conv::backward(
                        s,
                        self.nodes[*x].value.data(),
                        self.nodes[*w].value.data(),
                        &g,
                        self.rg(*x),
                    );
                    if let Some(dx) = cg.dx {
                        acc(*x, dx, &mut grads);
                    }
                    acc(*w, cg.dw, &mut grads);
                    if let Some(b) = b {
                        acc(*b, cg.db, &mut grads);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let (bsz, nin, nout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                    if self.rg(*x) {
                        let mut dx = vec![T::zero(); bsz * nin];
                        gemm(bsz, nout, nin, &g, false, wv.data(), false, &mut dx, T::zero());
                        acc(*x, dx, &mut grads);
                    }
                    if self.rg(*w) {
                        let mut dw = vec![T::zero(); nout * nin];
                        gemm(nout, bsz, nin, &g, true, xv.data(), false, &mut dw, T::zero());
                        acc(*w, dw, &mut grads);
                    }
                    if let Some(b) = b {
                        let mut db = vec![0.0f64; nout];
                        for row in g.chunks(nout) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
                        }
                        acc(*b, db.into_iter().map(T::from_f64).collect(), &mut grads);
                    }
                }
                Op::ChannelBias { x, bias } => {
                    let xs = self.nodes[*x].value.shape();
                    let hw = xs[2] * xs[3];
                    if self.rg(*bias) {
                        let db = g
                            .chunks(hw)
                            .map(|c| T::from_f64(c.iter().map(|v| v.as_f64()).sum()))
                            .collect();
                        acc(*bias, db, &mut grads);
                    }
                    acc(*x, g, &mut grads);
                }
                Op::Axpby { a, b, ca, cb } => {
                    let (ta, tb) = (T::from_f64(*ca), T::from_f64(*cb));
                    if self.rg(*b) {
                        acc(*b, g.iter().map(|&v| v * tb).collect(), &mut grads);
                    }
                    acc(*a, g.iter().map(|&v| v * ta).collect(), &mut grads);
                }
                Op::ScalePerSample { a, s } => {
                    let per = g.len() / s.len();
                    let mut d = g;
                    for (chunk, &c) in d.chunks_mut(per.max(1)).zip(s) {
                        let c = T::from_f64(c);
                        chunk.iter_mut().for_each(|v| *v *= c);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Silu { a } => {
                    let x = self.nodes[*a].value.data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| gv * T::from_f64(silu_grad(xv.as_f64())))
                        .collect();
                    acc(*a, d, &mut grads);
                }
                Op::Mask { a, mask } => {
                    let d = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    acc(*a, d, &mut grads);
                }
                Op::Concat { parts } => {
                    let b = node.value.shape()[0];
                    let per_out = g.len() / b;
                    let mut offset = 0;
                    for &p in parts {
                        let per = self.nodes[p].value.numel() / b;
                        if self.rg(p) {
                            let mut d = Vec::with_capacity(per * b);
                            for bi in 0..b {
                                let start = bi * per_out + offset;
                                d.extend_from_slice(&g[start..start + per]);
                            }
                            acc(p, d, &mut grads);
                        }
                        offset += per;
                    }
                }
                Op::WeightedMeanSquare { a, w } => {
                    let x = self.nodes[*a].value.data();
                    let b = w.len();
                    let per = x.len() / b;
                    let g0 = g[0].as_f64();
                    let mut d = Vec::with_capacity(x.len());
                    for (chunk, &wb) in x.chunks(per).zip(w) {
                        let c = g0 * wb * 2.0 / (b * per) as f64;
                        d.extend(chunk.iter().map(|&v| T::from_f64(c * v.as_f64())));
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Sum { a } => {
                    let n = self.nodes[*a].value.numel();
                    acc(*a, vec![g[0]; n], &mut grads);
                }
            }
        }
        Ok(Grads { grads })
    }

    /// Gradients of named parameters, in creation order. Parameters that did
    /// not influence the loss get zeros.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(String, Tensor<T>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let name = n.param.as_ref()?;
                let data = grads
                    .grads
                    .get(i)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![T::zero(); n.value.numel()]);
                Some((name.clone(), Tensor::new(n.value.shape().to_vec(), data).ok()?))
            })
            .collect()
    }
}
