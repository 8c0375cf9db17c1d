use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{broadcast_shape, broadcast_strides, broadcast_zip, reduce_to_shape, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Powf(Var, T),
    Gelu(Var),
    MatMul(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
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
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of one forward pass.
///
/// Nodes are appended in execution order, so the node list is already
/// topologically sorted. `backward` may run once per tape; start a new
/// tape (or call [`Tape::reset`]) for the next forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node that required grad; `None` for nodes that did not.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor {
                shape: ta.shape().to_vec(),
                data,
            });
        }
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::dim(op, ta.shape(), tb.shape()))?;
        let sa = broadcast_strides(ta.shape(), &out_shape);
        let sb = broadcast_strides(tb.shape(), &out_shape);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        broadcast_zip(&out_shape, &sa, &sb, |_, i, j| data.push(f(ta.data[i], tb.data[j])));
        Ok(Tensor { shape: out_shape, data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x).map(|e| e * s);
        self.push("scale", v, Op::Scale(x, s), &[x])
    }

    /// Elementwise `x^p` for a constant exponent.
    pub fn powf(&mut self, x: Var, p: T) -> Result<Var> {
        let v = self.value(x).map(|e| e.powf(p));
        self.push("powf", v, Op::Powf(x, p), &[x])
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(gelu);
        self.push("gelu", v, Op::Gelu(x), &[x])
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_forward(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::dim("softmax", t.shape(), &[]))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        let v = Tensor {
            shape: t.shape().to_vec(),
            data: out,
        };
        self.push("softmax", v, Op::Softmax(x), &[x])
    }

    /// Normalizes over the last axis then applies `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm", tx.shape(), tg.shape()))?;
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.len() / d;
        let n = T::of(d as f64);
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / n;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let v = Tensor {
            shape: tx.shape().to_vec(),
            data: out,
        };
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::dim("mse", p.shape(), t.shape()));
        }
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let v = Tensor::scalar(s / T::of(p.len() as f64));
        self.push("mse", v, Op::Mse(pred, target), &[pred, target])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push("sum", v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().copied().sum::<T>() / T::of(t.len() as f64));
        self.push("mean", v, Op::Mean(x), &[x])
    }

    /// Mean over one axis, removing it from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::dim("mean_axis", t.shape(), &[axis]));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let len = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &t.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let n = T::of(len as f64);
        out.iter_mut().for_each(|e| *e /= n);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        self.push("mean_axis", Tensor { shape, data: out }, Op::MeanAxis { x, axis }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        self.push("permute", v, Op::Permute { x, axes: axes.to_vec() }, &[x])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::dim("narrow", t.shape(), &[axis, start, len]));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let full = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push("narrow", Tensor { shape, data }, Op::Narrow { x, axis, start }, &[x])
    }

    /// Mean cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        let k = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::config(format!("target class {bad} out of range for {k} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut total = T::zero();
        for (row, &c) in probs.chunks_mut(k).zip(targets) {
            softmax_row(row);
            total -= row[c].ln();
        }
        let v = Tensor::scalar(total / T::of(targets.len() as f64));
        self.push(
            "cross_entropy",
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf that requires grad gets an entry, zero if it does not
    /// influence the loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::dim("backward", &loss_shape, &[]));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, self.shape(*a)));
                self.accumulate(grads, *b, reduce_to_shape(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, self.shape(*a)));
                self.accumulate(grads, *b, reduce_to_shape(&g.map(|e| -e), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = mul_broadcast(g, tb);
                    self.accumulate(grads, *a, reduce_to_shape(&ga, ta.shape()));
                }
                if self.requires_grad(*b) {
                    let gb = mul_broadcast(g, ta);
                    self.accumulate(grads, *b, reduce_to_shape(&gb, tb.shape()));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|e| e * *s)),
            Op::Powf(x, p) => {
                let tx = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| gv * *p * xv.powf(*p - T::one()))
                    .collect();
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: g.shape.clone(),
                        data,
                    },
                );
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let data = g.data().iter().zip(tx.data()).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: g.shape.clone(),
                        data,
                    },
                );
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(
                    self.value(*a),
                    self.value(*b),
                    g,
                    self.requires_grad(*a),
                    self.requires_grad(*b),
                );
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut out = vec![T::zero(); y.len()];
                for ((o, yr), gr) in out.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: y.shape.clone(),
                        data: out,
                    },
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let d = tg.len();
                let n = T::of(d as f64);
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(
                        grads,
                        *gamma,
                        Tensor {
                            shape: vec![d],
                            data: dg,
                        },
                    );
                    self.accumulate(
                        grads,
                        *beta,
                        Tensor {
                            shape: vec![d],
                            data: db,
                        },
                    );
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dh = vec![T::zero(); d];
                    for (r, ((o, gr), hr)) in dx.chunks_mut(d).zip(g.data().chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * tg.data()[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..d {
                            o[j] = rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    self.accumulate(
                        grads,
                        *x,
                        Tensor {
                            shape: g.shape.clone(),
                            data: dx,
                        },
                    );
                }
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (self.value(*p), self.value(*t));
                let c = g.item() * T::of(2.0) / T::of(tp.len() as f64);
                let diff: Vec<T> = tp.data().iter().zip(tt.data()).map(|(&a, &b)| c * (a - b)).collect();
                if self.requires_grad(*t) {
                    let neg = diff.iter().map(|&e| -e).collect();
                    self.accumulate(
                        grads,
                        *t,
                        Tensor {
                            shape: tt.shape.clone(),
                            data: neg,
                        },
                    );
                }
                self.accumulate(
                    grads,
                    *p,
                    Tensor {
                        shape: tp.shape.clone(),
                        data: diff,
                    },
                );
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let v = g.item() / T::of(t.len() as f64);
                self.accumulate(grads, *x, Tensor::full(t.shape.clone(), v));
            }
            Op::MeanAxis { x, axis } => {
                let t = self.value(*x);
                let outer: usize = t.shape()[..*axis].iter().product();
                let len = t.shape()[*axis];
                let inner: usize = t.shape()[*axis + 1..].iter().product();
                let n = T::of(len as f64);
                let mut out = vec![T::zero(); t.len()];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        let dst = &mut out[(o * len + a) * inner..(o * len + a + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s / n;
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: t.shape.clone(),
                        data: out,
                    },
                );
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape,
                        data: g.data.clone(),
                    },
                );
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                self.accumulate(grads, *x, g.permute(&inverse)?);
            }
            Op::Narrow { x, axis, start } => {
                let t = self.value(*x);
                let outer: usize = t.shape()[..*axis].iter().product();
                let full = t.shape()[*axis];
                let len = g.shape()[*axis];
                let inner: usize = t.shape()[*axis + 1..].iter().product();
                let mut out = vec![T::zero(); t.len()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    out[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: t.shape.clone(),
                        data: out,
                    },
                );
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g.item() / T::of(targets.len() as f64);
                let mut out = probs.clone();
                for (row, &c) in out.chunks_mut(k).zip(targets) {
                    row[c] -= T::one();
                    row.iter_mut().for_each(|e| *e *= scale);
                }
                self.accumulate(
                    grads,
                    *logits,
                    Tensor {
                        shape: vec![targets.len(), k],
                        data: out,
                    },
                );
            }
        }
        Ok(())
    }
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        total += *e;
    }
    for e in row.iter_mut() {
        *e /= total;
    }
}

/// `g ⊙ other`, with `other` broadcast to `g`'s shape.
fn mul_broadcast<T: Real>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if g.shape() == other.shape() {
        let data = g.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        return Tensor {
            shape: g.shape.clone(),
            data,
        };
    }
    let so = broadcast_strides(other.shape(), g.shape());
    let zeros = vec![0; g.rank()];
    let mut data = Vec::with_capacity(g.len());
    broadcast_zip(g.shape(), &zeros, &so, |o, _, j| data.push(g.data[o] * other.data[j]));
    Tensor {
        shape: g.shape.clone(),
        data,
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (out, a, b) matrix indices for every broadcast batch entry.
    batches: Vec<(usize, usize, usize)>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
        return Err(Error::dim("matmul", a, b));
    }
    let (m, k, n) = (a[a.len() - 2], a[a.len() - 1], b[b.len() - 1]);
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ab, bb).ok_or_else(|| Error::dim("matmul", a, b))?;
    let sa = broadcast_strides(ab, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut batches = Vec::new();
    broadcast_zip(&batch, &sa, &sb, |o, i, j| batches.push((o, i, j)));
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        batches,
    })
}

fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![T::zero(); plan.out_shape.iter().product()];
    if b.rank() == 2 {
        // batch axes come from `a` alone, so the batch folds into the rows
        gemm_nn(a.len() / k, k, n, a.data(), b.data(), &mut out);
        return Ok(Tensor {
            shape: plan.out_shape,
            data: out,
        });
    }
    for &(o, i, j) in &plan.batches {
        gemm_nn(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[j * k * n..(j + 1) * k * n],
            &mut out[o * m * n..(o + 1) * m * n],
        );
    }
    Ok(Tensor {
        shape: plan.out_shape,
        data: out,
    })
}

fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let plan = matmul_plan(a.shape(), b.shape()).expect("shapes validated in forward");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = need_a.then(|| vec![T::zero(); a.len()]);
    let mut gb = need_b.then(|| vec![T::zero(); b.len()]);
    if b.rank() == 2 {
        let rows = a.len() / k;
        if let Some(ga) = ga.as_mut() {
            gemm_nt(rows, n, k, g.data(), b.data(), ga);
        }
        if let Some(gb) = gb.as_mut() {
            gemm_tn(rows, k, n, a.data(), g.data(), gb);
        }
    } else {
        for &(o, i, j) in &plan.batches {
            let gm = &g.data()[o * m * n..(o + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                gemm_nt(
                    m,
                    n,
                    k,
                    gm,
                    &b.data()[j * k * n..(j + 1) * k * n],
                    &mut ga[i * m * k..(i + 1) * m * k],
                );
            }
            if let Some(gb) = gb.as_mut() {
                gemm_tn(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    gm,
                    &mut gb[j * k * n..(j + 1) * k * n],
                );
            }
        }
    }
    let wrap = |data: Vec<T>, t: &Tensor<T>| Tensor {
        shape: t.shape.clone(),
        data,
    };
    (ga.map(|d| wrap(d, a)), gb.map(|d| wrap(d, b)))
}
