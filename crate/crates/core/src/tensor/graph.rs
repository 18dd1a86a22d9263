//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in creation order, so every input index is smaller
//! than the index of the node consuming it. The backward sweep walks indices
//! downwards and therefore visits the graph in reverse topological order,
//! each node once.

use super::conv::{self, ConvGeom};
use super::{broadcast_offsets, broadcast_shape, check_finite, gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    /// Parameter, input or constant.
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, T),
    Neg(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    L2Normalize {
        input: Var,
        eps: T,
        norms: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    BatchNorm {
        input: Var,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    Narrow {
        input: Var,
        start: usize,
    },
    Sum(Var),
    SumLast(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording context for one forward pass.
///
/// Leaves created with [`Graph::param`] require gradients; after
/// [`Graph::backward`] their gradients are available from [`Graph::grad`].
/// Gradients accumulate across repeated backward calls until
/// [`Graph::zero_grad`].
pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", value.data())?;
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Gradient-tracked leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
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

    /// Accumulated gradient of a leaf, present once a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.value(v).shape(), data.clone()).expect("grad matches value shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn emit(&mut self, op_name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, rg, op))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape(), data)?
        } else {
            let shape = broadcast_shape(name, av.shape(), bv.shape())?;
            let oa = broadcast_offsets(&shape, av.shape());
            let ob = broadcast_offsets(&shape, bv.shape());
            let data = oa
                .iter()
                .zip(&ob)
                .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
                .collect();
            Tensor::new(&shape, data)?
        };
        self.emit(name, value, &[a, b], Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let value = Tensor::new(av.shape(), av.data().iter().map(|&x| x * s).collect())?;
        self.emit("scale", value, &[a], Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let value = Tensor::new(av.shape(), av.data().iter().map(|&x| -x).collect())?;
        self.emit("neg", value, &[a], Op::Neg(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let value = Tensor::new(av.shape(), av.data().iter().map(|&x| x.max(T::zero())).collect())?;
        self.emit("relu", value, &[a], Op::Relu(a))
    }

    /// `max(x, 0)` elementwise; the same rule as [`Graph::relu`].
    pub fn clamp_min_zero(&mut self, a: Var) -> Result<Var> {
        self.relu(a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        self.emit("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("{:?} is not 2-d", av.shape())));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let value = Tensor::new(&[c, r], super::transpose(av.data(), r, c))?;
        self.emit("transpose", value, &[a], Op::Transpose(a))
    }

    /// 2-D convolution of `[B, C, H, W]` by `[F, C, kh, kw]` with an optional
    /// per-filter bias of shape `[F]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.filters] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), geom.filters),
                ));
            }
        }
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        let track = inputs.iter().any(|&v| self.requires_grad(v));
        let (out, cols) = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            track && self.requires_grad(kernel),
        );
        let value = Tensor::new(&geom.out_shape(), out)?;
        self.emit(
            "conv2d",
            value,
            &inputs,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        )
    }

    /// Normalize each vector along the last axis to unit length; the norm is
    /// clamped below at `eps`.
    pub fn l2_normalize(&mut self, a: Var, eps: T) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let d = *av.shape().last().expect("non-empty shape");
        let mut norms = Vec::with_capacity(av.numel() / d);
        let mut out = Vec::with_capacity(av.numel());
        for row in av.data().chunks(d) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            let denom = n.max(eps);
            norms.push(n);
            out.extend(row.iter().map(|&x| x / denom));
        }
        let value = Tensor::new(av.shape(), out)?;
        self.emit("l2_normalize", value, &[a], Op::L2Normalize { input: a, eps, norms })
    }

    /// Standardize each column of a `[N, d]` matrix with its batch mean and
    /// biased variance: `(x − μ) / sqrt(σ² + eps)`.
    pub fn batch_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected [N, d], got {:?}", av.shape()),
            ));
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let inv_n = T::one() / T::of(n as f64);
        let x = av.data();
        let mut mean = vec![T::zero(); d];
        for row in x.chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v * inv_n;
            }
        }
        let mut var = vec![T::zero(); d];
        for row in x.chunks(d) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s = *s + (v - m) * (v - m) * inv_n;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = x
            .chunks(d)
            .flat_map(|row| row.iter().zip(&mean).zip(&inv_std).map(|((&v, &m), &r)| (v - m) * r))
            .collect();
        let value = Tensor::new(&[n, d], out)?;
        self.emit("batch_norm", value, &[a], Op::BatchNorm { input: a, inv_std })
    }

    /// Cosine similarity along the last axis. Result drops that axis
    /// (a pair of vectors gives shape `[1]`).
    pub fn cosine(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::shape("cosine", format!("{sa:?} vs {sb:?}")));
        }
        let d = *sa.last().expect("non-empty shape");
        let norm = |data: &[T]| -> Vec<T> {
            data.chunks(d)
                .map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt())
                .collect()
        };
        let (na, nb) = (norm(self.value(a).data()), norm(self.value(b).data()));
        if na.iter().zip(&nb).any(|(&x, &y)| x <= eps && y <= eps) {
            return Err(Error::Degenerate(
                "cosine of two zero-norm vectors (feature collapse)".into(),
            ));
        }
        let ua = self.l2_normalize(a, eps)?;
        let ub = self.l2_normalize(b, eps)?;
        let prod = self.mul(ua, ub)?;
        self.sum_last(prod)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {first:?}")));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.emit(
            "concat",
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        self.emit("reshape", value, &[a], Op::Reshape(a))
    }

    /// Rows `start..start+len` along the first axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let rows = av.shape()[0];
        if len == 0 || start + len > rows {
            return Err(Error::shape(
                "narrow",
                format!("rows {start}..{} of {:?}", start + len, av.shape()),
            ));
        }
        let width = av.numel() / rows;
        let mut shape = av.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(&shape, av.data()[start * width..(start + len) * width].to_vec())?;
        self.emit("narrow", value, &[a], Op::Narrow { input: a, start })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.emit("sum", Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::of(self.value(a).numel() as f64);
        let s = self.sum(a)?;
        self.scale(s, T::one() / n)
    }

    /// Sum over the last axis, dropping it (rank-1 inputs give shape `[1]`).
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = *av.shape().last().expect("non-empty shape");
        let mut shape = av.shape()[..av.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let data = av.data().chunks(d).map(|r| r.iter().copied().sum::<T>()).collect();
        let value = Tensor::new(&shape, data)?;
        self.emit("sum_last", value, &[a], Op::SumLast(a))
    }

    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let d = *self.shape(a).last().expect("non-empty shape");
        let s = self.sum_last(a)?;
        self.scale(s, T::one() / T::of(d as f64))
    }

    /// Same value, no gradient path back to `a`.
    pub fn stopgrad(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, false, Op::Leaf)
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}, expected a scalar", self.shape(loss)),
            ));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<T>>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut self.grads[i], &g);
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g) {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut pending[input.0], &contribution);
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let out_shape = node.value.shape();
                let same = av.shape() == bv.shape();
                let oa = if same {
                    None
                } else {
                    Some(broadcast_offsets(out_shape, av.shape()))
                };
                let ob = if same {
                    None
                } else {
                    Some(broadcast_offsets(out_shape, bv.shape()))
                };
                let idx = |o: &Option<Vec<usize>>, k: usize| o.as_ref().map_or(k, |o| o[k]);
                let mut ga = vec![T::zero(); av.numel()];
                let mut gb = vec![T::zero(); bv.numel()];
                for (k, &gk) in g.iter().enumerate() {
                    let (ia, ib) = (idx(&oa, k), idx(&ob, k));
                    match kind {
                        Binary::Add => {
                            ga[ia] = ga[ia] + gk;
                            gb[ib] = gb[ib] + gk;
                        }
                        Binary::Sub => {
                            ga[ia] = ga[ia] + gk;
                            gb[ib] = gb[ib] - gk;
                        }
                        Binary::Mul => {
                            ga[ia] = ga[ia] + gk * bv.data()[ib];
                            gb[ib] = gb[ib] + gk * av.data()[ia];
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|&x| x * *s).collect())],
            Op::Neg(a) => vec![(*a, g.iter().map(|&x| -x).collect())],
            Op::Relu(a) => {
                let gi = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gk, &x)| if x > T::zero() { gk } else { T::zero() })
                    .collect();
                vec![(*a, gi)]
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut out = Vec::new();
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt(g, bv.data(), &mut ga, m, n, k);
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn(av.data(), g, &mut gb, k, m, n);
                    out.push((*b, gb));
                }
                out
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                vec![(*a, super::transpose(g, s[1], s[0]))]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let grads = conv::backward(
                    geom,
                    g,
                    val(*kernel).data(),
                    cols,
                    wants(*input),
                    wants(*kernel),
                    bias.is_some_and(wants),
                );
                let mut out = Vec::new();
                if let Some(gi) = grads.input {
                    out.push((*input, gi));
                }
                if let Some(gk) = grads.kernel {
                    out.push((*kernel, gk));
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    out.push((*b, gb));
                }
                out
            }
            Op::L2Normalize { input, eps, norms } => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("non-empty shape");
                let mut gi = Vec::with_capacity(g.len());
                for ((gr, yr), &n) in g.chunks(d).zip(y.chunks(d)).zip(norms) {
                    if n > *eps {
                        let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                        gi.extend(gr.iter().zip(yr).map(|(&gk, &yk)| (gk - yk * dot) / n));
                    } else {
                        gi.extend(gr.iter().map(|&gk| gk / *eps));
                    }
                }
                vec![(*input, gi)]
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<T>> = inputs.iter().map(|&v| Vec::with_capacity(val(v).numel())).collect();
                let mut cursor = 0;
                for _ in 0..outer {
                    for (p, &v) in parts.iter_mut().zip(inputs) {
                        let chunk = val(v).shape()[*axis] * inner;
                        p.extend_from_slice(&g[cursor..cursor + chunk]);
                        cursor += chunk;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::BatchNorm { input, inv_std } => {
                let y = node.value.data();
                let d = inv_std.len();
                let inv_n = T::one() / T::of((y.len() / d) as f64);
                let mut mg = vec![T::zero(); d];
                let mut mgy = vec![T::zero(); d];
                for (gr, yr) in g.chunks(d).zip(y.chunks(d)) {
                    for j in 0..d {
                        mg[j] = mg[j] + gr[j] * inv_n;
                        mgy[j] = mgy[j] + gr[j] * yr[j] * inv_n;
                    }
                }
                let gi = g
                    .chunks(d)
                    .zip(y.chunks(d))
                    .flat_map(|(gr, yr)| (0..d).map(move |j| (j, gr[j], yr[j])))
                    .map(|(j, gk, yk)| inv_std[j] * (gk - mg[j] - yk * mgy[j]))
                    .collect();
                vec![(*input, gi)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Narrow { input, start } => {
                let iv = val(*input);
                let width = iv.numel() / iv.shape()[0];
                let mut gi = vec![T::zero(); iv.numel()];
                gi[start * width..start * width + g.len()].copy_from_slice(g);
                vec![(*input, gi)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::SumLast(a) => {
                let av = val(*a);
                let d = *av.shape().last().expect("non-empty shape");
                let gi = g.iter().flat_map(|&gk| std::iter::repeat_n(gk, d)).collect();
                vec![(*a, gi)]
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a = *a + x;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn relu_and_identity_add() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::zeros(&[3])).unwrap();
        let s = g.add(x, z).unwrap();
        assert_eq!(g.value(s), g.value(x));
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(g.matmul(a, x).is_ok());
        assert!(g.matmul(x, a).is_err());
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 5, 5])).unwrap();
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 9.0));

        let img = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let x = g.constant(img.clone()).unwrap();
        let id = g.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = g.conv2d(x, id, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &img);

        let big = g.constant(Tensor::ones(&[1, 1, 4, 4])).unwrap();
        assert!(g.conv2d(x, big, None, 1, 0).is_err());
    }

    #[test]
    fn l2_normalize_and_cosine() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let n = g.l2_normalize(v, 1e-12).unwrap();
        let d = g.value(n).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        let n2 = g.l2_normalize(n, 1e-12).unwrap();
        assert_eq!(g.value(n2), g.value(n));

        let a = g.constant(t(&[2], &[1.0, 0.0])).unwrap();
        let b = g.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let c = g.cosine(a, b, 1e-12).unwrap();
        assert!((g.value(c).item().unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let na = g.neg(a).unwrap();
        let c = g.cosine(a, na, 1e-12).unwrap();
        assert_eq!(g.value(c).item().unwrap(), -1.0);
        let c = g.cosine(b, b, 1e-12).unwrap();
        assert!((g.value(c).item().unwrap() - 1.0).abs() < 1e-15);

        let z = g.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.cosine(z, z, 1e-12), Err(Error::Degenerate(_))));
        // one zero side is clamped, not an error
        let c = g.cosine(z, a, 1e-12).unwrap();
        assert_eq!(g.value(c).item().unwrap(), 0.0);
    }

    #[test]
    fn concat_mean_stopgrad() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.param(t(&[3], &[3.0, 4.0, 5.0])).unwrap();
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.shape(c), &[5]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);

        let x = g.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 2.0);

        let s = g.stopgrad(x);
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_sum_and_accumulation() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[4], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[3.0])).unwrap();
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
        // a second pass accumulates until zero_grad
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn mul_gradient_is_the_other_factor() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[1], &[3.0])).unwrap();
        let b = g.param(t(&[1], &[4.0])).unwrap();
        let p = g.mul(a, b).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[4.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_inputs_are_errors() {
        let mut g = Graph::<f64>::new();
        assert!(g.param(t(&[1], &[f64::NAN])).is_err());
        let big = g.param(t(&[1], &[1e200])).unwrap();
        assert!(matches!(g.mul(big, big), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn broadcast_add_gradient_sums_over_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[3, 2])).unwrap();
        let b = g.param(t(&[2], &[0.5, -0.5])).unwrap();
        let y = g.add(x, b).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }
}
