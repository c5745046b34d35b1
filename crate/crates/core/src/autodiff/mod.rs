//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation eagerly as it is applied; node order is
//! creation order, which is a topological order by construction. `backward`
//! sweeps the tape in reverse. Nodes built only from constants do not
//! require gradients and are skipped by the sweep.
//!
//! Two node kinds, top-T selection and the quantizing activation, are
//! piecewise constant in their input. Their exact backward is the selection
//! mask and zero respectively; a [`SurrogateRegistry`] entry swaps in a
//! different backward rule without touching the forward value.

mod conv;
mod surrogate;

pub use conv::ConvGeometry;
pub use surrogate::{SurrogateKind, SurrogateRegistry, SurrogateRule};

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MatMul(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d(Var, Var, ConvGeometry),
    ConvTranspose2d(Var, Var, ConvGeometry),
    Relu(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, label: usize },
    CwMargin { logits: Var, label: usize, rival: usize },
    Reshape(Var),
    Slice { x: Var, start: usize },
    SumAll(Var),
    MaxAll { x: Var, at: usize },
    GlobalAvgPool(Var),
    TopT { x: Var, t: usize },
    Quantize { x: Var, scales: Vec<F>, eps: F, beta: F },
}

#[derive(Debug)]
struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not depend on any differentiable leaf or is unreachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    surrogates: SurrogateRegistry,
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            surrogates: SurrogateRegistry::default(),
        }
    }

    pub fn with_surrogates(surrogates: SurrogateRegistry) -> Self {
        Self {
            nodes: Vec::new(),
            surrogates,
        }
    }

    /// Activate a named backward rule (`identity`, `smooth-activation(k)`,
    /// `top-u-routing(U)`) for every node of `kind` on this tape.
    pub fn register_surrogate(&mut self, kind: SurrogateKind, rule_name: &str) -> Result<()> {
        self.surrogates.register_named(kind, rule_name)
    }

    pub fn set_surrogate(&mut self, kind: SurrogateKind, rule: SurrogateRule) -> Result<()> {
        self.surrogates.register(kind, rule)
    }

    pub fn surrogates(&self) -> &SurrogateRegistry {
        &self.surrogates
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Tensor<F>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, factor), v, rg)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    /// Adds `bias[c]` to every entry of channel `c` of `x: [C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.is_empty() || sb != [sx[0]] {
            return Err(Error::shape("add_channel_bias", &sx, &sb));
        }
        let inner: usize = sx[1..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for (c, chunk) in v.data_mut().chunks_mut(inner.max(1)).enumerate() {
            chunk.iter_mut().for_each(|e| *e += b[c]);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Op::AddChannelBias(x, bias), v, rg))
    }

    /// `x: [C_in, H, W]`, `w: [C_out, C_in, kh, kw]` → `[C_out, H', W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let (l, c_out) = conv::conv_layout(self.shape(x), self.shape(w), geom)?;
        let out = conv::conv_forward(self.value(x).data(), self.value(w).data(), &l, c_out);
        let v = Tensor::new(vec![c_out, l.out_h, l.out_w], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Op::Conv2d(x, w, geom), v, rg))
    }

    /// `x: [C_in, H, W]`, `w: [C_in, C_out, kh, kw]` → `[C_out, H', W']`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let l = conv::transposed_layout(self.shape(x), self.shape(w), geom)?;
        let c_in = self.shape(x)[0];
        let out = conv::transposed_forward(self.value(x).data(), self.value(w).data(), &l, c_in);
        let v = Tensor::new(vec![l.c, l.h, l.w], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Op::ConvTranspose2d(x, w, geom), v, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > F::zero() { e } else { F::zero() });
        let rg = self.rg(&[x]);
        self.push(Op::Relu(x), v, rg)
    }

    /// Softmax over all entries of `x`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_values(self.value(x));
        let rg = self.rg(&[x]);
        self.push(Op::Softmax(x), v, rg)
    }

    /// `-log softmax(logits)[label]` for a flat logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 1 || label >= z.len() {
            return Err(Error::invalid(format!(
                "cross_entropy: label {label} for logits of shape {:?}",
                z.shape()
            )));
        }
        let lse = log_sum_exp(z.data());
        let loss = lse - z.data()[label];
        let rg = self.rg(&[logits]);
        Ok(self.push(Op::CrossEntropy { logits, label }, Tensor::scalar(loss), rg))
    }

    /// `max_{i != label} z_i - z_label`; positive exactly when the input is
    /// misclassified, so ascending it pushes toward misclassification.
    pub fn cw_margin(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 1 || label >= z.len() {
            return Err(Error::invalid(format!(
                "cw_margin: label {label} for logits of shape {:?}",
                z.shape()
            )));
        }
        if z.len() < 2 {
            return Err(Error::invalid("cw_margin needs at least two classes"));
        }
        let (rival, best) = z
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != label)
            .fold((usize::MAX, F::neg_infinity()), |(bi, bv), (i, &v)| {
                if bi == usize::MAX || v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        let loss = best - z.data()[label];
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::CwMargin {
                logits,
                label,
                rival,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), v, rg))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return Err(Error::invalid(format!(
                "slice {start}..{} out of range for shape {shape:?}",
                start + len
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::Slice { x, start },
            Tensor::new(out_shape, data)?,
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(Op::SumAll(x), v, rg)
    }

    pub fn max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::invalid("max of an empty tensor"));
        }
        let at = t.argmax();
        let v = Tensor::scalar(t.data()[at]);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::MaxAll { x, at }, v, rg))
    }

    /// `[C, H, W] → [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("global_avg_pool", &shape, &[0, 0, 0]));
        }
        let hw = shape[1] * shape[2];
        let inv = F::one() / F::of(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<F>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::GlobalAvgPool(x), Tensor::new(vec![shape[0]], data)?, rg))
    }

    /// Keeps the `t` largest-magnitude entries of every channel fiber of
    /// `x: [L, H, W]` and zeroes the rest. Ties go to the lower channel.
    pub fn top_t(&mut self, x: Var, t: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("top_t", &shape, &[0, 0, 0]));
        }
        if t == 0 || t > shape[0] {
            return Err(Error::invalid(format!("top_t: T={t} outside 1..={}", shape[0])));
        }
        let mask = fiber_mask(self.value(x), t);
        let mut v = self.value(x).clone();
        for (e, keep) in v.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *e = F::zero();
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::TopT { x, t }, v, rg))
    }

    /// Quantizing activation on `x: [L, H, W]`: entry `(l, ·)` maps to
    /// `sign(x)·scales[l]` when `|x| / (eps·scales[l]) >= beta`, else 0.
    pub fn quantize(&mut self, x: Var, scales: &[F], eps: F, beta: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != scales.len() {
            return Err(Error::shape("quantize", &shape, &[scales.len()]));
        }
        if !(eps > F::zero()) {
            return Err(Error::invalid("quantize: eps must be positive"));
        }
        let v = quantize_values(self.value(x), scales, eps, beta);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::Quantize {
                x,
                scales: scales.to_vec(),
                eps,
                beta,
            },
            v,
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let loss_shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(loss_shape.to_vec(), F::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (input, contrib) in self.node_backward(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let like = |v: Var, data: Vec<F>| {
            Tensor::new(self.shape(v).to_vec(), data).expect("gradient matches value shape")
        };
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|e| -e)));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = zip(g.data(), self.value(*b).data(), |x, y| x * y);
                    out.push((*a, like(*a, d)));
                }
                if self.wants(*b) {
                    let d = zip(g.data(), self.value(*a).data(), |x, y| x * y);
                    out.push((*b, like(*b, d)));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.map(|e| e * *f))),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut d = vec![F::zero(); m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut d, false);
                    out.push((*a, like(*a, d)));
                }
                if self.wants(*b) {
                    let mut d = vec![F::zero(); k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut d, false);
                    out.push((*b, like(*b, d)));
                }
            }
            Op::AddChannelBias(x, bias) => {
                out.push((*x, g.clone()));
                if self.wants(*bias) {
                    let c = self.shape(*bias)[0];
                    let inner = (g.len() / c).max(1);
                    let d = g.data().chunks(inner).map(|ch| ch.iter().copied().sum()).collect();
                    out.push((*bias, like(*bias, d)));
                }
            }
            Op::Conv2d(x, w, geom) => {
                let (l, c_out) = conv::conv_layout(self.shape(*x), self.shape(*w), *geom)?;
                if self.wants(*x) {
                    let d = conv::conv_backward_input(g.data(), self.value(*w).data(), &l, c_out);
                    out.push((*x, like(*x, d)));
                }
                if self.wants(*w) {
                    let d = conv::conv_backward_weight(g.data(), self.value(*x).data(), &l, c_out);
                    out.push((*w, like(*w, d)));
                }
            }
            Op::ConvTranspose2d(x, w, geom) => {
                let l = conv::transposed_layout(self.shape(*x), self.shape(*w), *geom)?;
                let c_in = self.shape(*x)[0];
                if self.wants(*x) {
                    let d =
                        conv::transposed_backward_input(g.data(), self.value(*w).data(), &l, c_in);
                    out.push((*x, like(*x, d)));
                }
                if self.wants(*w) {
                    let d =
                        conv::transposed_backward_weight(g.data(), self.value(*x).data(), &l, c_in);
                    out.push((*w, like(*w, d)));
                }
            }
            Op::Relu(x) => {
                let d = zip(g.data(), self.value(*x).data(), |gi, xi| {
                    if xi > F::zero() {
                        gi
                    } else {
                        F::zero()
                    }
                });
                out.push((*x, like(*x, d)));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot: F = g.data().iter().zip(y).map(|(&a, &b)| a * b).sum();
                let d = zip(g.data(), y, |gi, yi| yi * (gi - dot));
                out.push((*x, like(*x, d)));
            }
            Op::CrossEntropy { logits, label } => {
                let gs = g.data()[0];
                let mut p = softmax_values(self.value(*logits)).into_data();
                p[*label] -= F::one();
                p.iter_mut().for_each(|e| *e *= gs);
                out.push((*logits, like(*logits, p)));
            }
            Op::CwMargin {
                logits,
                label,
                rival,
            } => {
                let gs = g.data()[0];
                let mut d = vec![F::zero(); self.value(*logits).len()];
                d[*rival] += gs;
                d[*label] -= gs;
                out.push((*logits, like(*logits, d)));
            }
            Op::Reshape(x) => out.push((*x, like(*x, g.data().to_vec()))),
            Op::Slice { x, start } => {
                let shape = self.shape(*x);
                let inner: usize = shape[1..].iter().product();
                let mut d = vec![F::zero(); self.value(*x).len()];
                d[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                out.push((*x, like(*x, d)));
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                out.push((*x, like(*x, vec![g.data()[0]; n])));
            }
            Op::MaxAll { x, at } => {
                let mut d = vec![F::zero(); self.value(*x).len()];
                d[*at] = g.data()[0];
                out.push((*x, like(*x, d)));
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x);
                let hw = shape[1] * shape[2];
                let inv = F::one() / F::of(hw as f64);
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&gc| std::iter::repeat_n(gc * inv, hw))
                    .collect();
                out.push((*x, like(*x, d)));
            }
            Op::TopT { x, t } => {
                let d = match self.surrogates.get(SurrogateKind::Selection) {
                    Some(SurrogateRule::Identity) => g.data().to_vec(),
                    Some(SurrogateRule::TopURouting { u }) => {
                        let l = self.shape(*x)[0];
                        masked(g.data(), &fiber_mask(self.value(*x), u.clamp(1, l)))
                    }
                    _ => masked(g.data(), &fiber_mask(self.value(*x), *t)),
                };
                out.push((*x, like(*x, d)));
            }
            Op::Quantize {
                x,
                scales,
                eps,
                beta,
            } => {
                let d = match self.surrogates.get(SurrogateKind::Quantizer) {
                    Some(SurrogateRule::Identity) => g.data().to_vec(),
                    Some(SurrogateRule::SmoothActivation { steepness }) => smooth_quantizer_grad(
                        g,
                        self.value(*x),
                        scales,
                        *eps,
                        *beta,
                        F::of(steepness),
                    ),
                    _ => vec![F::zero(); g.len()],
                };
                out.push((*x, like(*x, d)));
            }
        }
        Ok(out)
    }
}

fn zip<F: Float>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn masked<F: Float>(g: &[F], mask: &[bool]) -> Vec<F> {
    g.iter()
        .zip(mask)
        .map(|(&v, &keep)| if keep { v } else { F::zero() })
        .collect()
}

fn log_sum_exp<F: Float>(z: &[F]) -> F {
    let m = z.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_values<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let m = x.data().iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = x.data().iter().map(|&v| (v - m).exp()).collect();
    let s: F = e.iter().copied().sum();
    Tensor::new(x.shape().to_vec(), e.into_iter().map(|v| v / s).collect())
        .expect("same shape")
}

/// Order for top-k selection: larger magnitude first, lower index on ties.
#[inline]
fn rank_order<F: Float>(a: (usize, F), b: (usize, F)) -> Ordering {
    b.1.abs()
        .partial_cmp(&a.1.abs())
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Indices of the `k` largest-magnitude entries of `fiber`, ties broken by
/// lower index.
pub(crate) fn top_k_indices<F: Float>(fiber: &[F], k: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, F)> = fiber.iter().copied().enumerate().collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(a, b));
        idx.truncate(k);
    }
    idx.into_iter().map(|(i, _)| i).collect()
}

/// Keep-mask over `x: [L, H, W]` selecting the top `k` entries of each
/// channel fiber.
pub(crate) fn fiber_mask<F: Float>(x: &Tensor<F>, k: usize) -> Vec<bool> {
    let l = x.shape()[0];
    let hw = x.len() / l.max(1);
    let data = x.data();
    let mut mask = vec![false; x.len()];
    let mut fiber = vec![F::zero(); l];
    for p in 0..hw {
        for (c, f) in fiber.iter_mut().enumerate() {
            *f = data[c * hw + p];
        }
        for c in top_k_indices(&fiber, k) {
            mask[c * hw + p] = true;
        }
    }
    mask
}

pub(crate) fn quantize_values<F: Float>(x: &Tensor<F>, scales: &[F], eps: F, beta: F) -> Tensor<F> {
    let l = scales.len();
    let hw = x.len() / l.max(1);
    let mut out = x.clone();
    for (i, e) in out.data_mut().iter_mut().enumerate() {
        let s = scales[i / hw];
        let v = *e;
        *e = if v.abs() / (eps * s) >= beta {
            if v > F::zero() {
                s
            } else {
                -s
            }
        } else {
            F::zero()
        };
    }
    out
}

#[inline]
fn sigmoid<F: Float>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

/// Backward of `s·(σ(k(x−τ)/τ) − σ(−k(x+τ)/τ))`, τ = β·ε·s, which tends to
/// the quantizer's step pair at ±τ as k grows.
fn smooth_quantizer_grad<F: Float>(
    g: &Tensor<F>,
    x: &Tensor<F>,
    scales: &[F],
    eps: F,
    beta: F,
    k: F,
) -> Vec<F> {
    let hw = x.len() / scales.len().max(1);
    g.data()
        .iter()
        .zip(x.data())
        .enumerate()
        .map(|(i, (&gi, &xi))| {
            let s = scales[i / hw];
            let tau = beta * eps * s;
            let a = sigmoid(k * (xi - tau) / tau);
            let b = sigmoid(-k * (xi + tau) / tau);
            let slope = s * k / tau * (a * (F::one() - a) + b * (F::one() - b));
            gi * slope
        })
        .collect()
}
