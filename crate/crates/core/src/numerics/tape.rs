//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the nodes in exact reverse order of recording and accumulates
//! gradients additively, so a value consumed twice receives the sum of both
//! contributions.

use std::str::FromStr;

use super::tensor::{matmul_kernel, matmul_t_kernel, matmul_tn_kernel, transpose_kernel, Real, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The supported primitive set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    MatMulT,
    Add,
    Sub,
    Mul,
    Scale,
    Gelu,
    Softmax,
    LayerNorm,
    Reshape,
    Transpose,
    Concat,
    Slice,
    Sum,
    Mean,
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::MatMul,
            "matmul_t" => Primitive::MatMulT,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "scale" => Primitive::Scale,
            "gelu" => Primitive::Gelu,
            "softmax" => Primitive::Softmax,
            "layer_norm" | "layernorm" => Primitive::LayerNorm,
            "reshape" => Primitive::Reshape,
            "transpose" => Primitive::Transpose,
            "concat" => Primitive::Concat,
            "slice" => Primitive::Slice,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }
}

/// Attributes for [`Tape::apply`]; each primitive reads only the fields it needs.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub scale: Option<f64>,
    pub axis: Option<usize>,
    pub range: Option<(usize, usize)>,
    pub shape: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Reshape(Var),
    Transpose(Var),
    Concat { axis: usize, parts: Vec<Var> },
    Slice { x: Var, axis: usize, start: usize, end: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// A tape is single-owner. Build one per forward pass; call [`Tape::backward`]
/// at most once per scalar loss.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    tracking: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records gradient information.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: true,
        }
    }

    /// A tape for inference; `backward` is refused.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.tracking,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        let requires_grad = self.tracking && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Inputs are no longer needed for backward when nothing upstream needs a gradient.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Name-based dispatch over the primitive set.
    pub fn apply(&mut self, name: &str, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let prim: Primitive = name.parse()?;
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape("apply", format!("{name} takes {n} inputs, got {}", inputs.len())))
            }
        };
        let missing = |what: &str| Error::shape("apply", format!("{name} requires attribute {what}"));
        match prim {
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::MatMulT => {
                arity(2)?;
                self.matmul_t(inputs[0], inputs[1])
            }
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Scale => {
                arity(1)?;
                self.scale(inputs[0], attrs.scale.ok_or_else(|| missing("scale"))?)
            }
            Primitive::Gelu => {
                arity(1)?;
                self.gelu(inputs[0])
            }
            Primitive::Softmax => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            Primitive::LayerNorm => {
                arity(1)?;
                self.layer_norm(inputs[0])
            }
            Primitive::Reshape => {
                arity(1)?;
                let shape = attrs.shape.as_deref().ok_or_else(|| missing("shape"))?;
                self.reshape(inputs[0], shape)
            }
            Primitive::Transpose => {
                arity(1)?;
                self.transpose(inputs[0])
            }
            Primitive::Concat => self.concat(inputs, attrs.axis.unwrap_or(0)),
            Primitive::Slice => {
                arity(1)?;
                let (start, end) = attrs.range.ok_or_else(|| missing("range"))?;
                self.slice(inputs[0], attrs.axis.unwrap_or(0), start, end)
            }
            Primitive::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
            Primitive::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a 2-D operand, got {s:?}"))),
        }
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a[m,k] · b[n,k]ᵀ`, the layout used for `[out, in]` weight matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("inner dims {k} vs {k2}")));
        }
        let out = matmul_t_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul_t", Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), &[a, b])
    }

    /// Checks that `b` either matches `a` or is a vector broadcast over the rows of `a`.
    fn broadcast_ok(&self, a: Var, b: Var, op: &'static str) -> Result<bool> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(false);
        }
        if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            return Ok(true);
        }
        Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let broadcast = self.broadcast_ok(a, b, name)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let out: Vec<T> = if broadcast {
            let n = bv.len();
            av.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % n])).collect()
        } else {
            av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(name, value, op, &[a, b])
    }

    /// Elementwise sum; `b` may be a row vector broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product; `b` may be a row vector broadcast over `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64_lossy(s);
        let value = self.value(a).map(|x| x * s);
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let cols = *av.shape().last().expect("tensor has at least one dim");
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let cols = *av.shape().last().expect("tensor has at least one dim");
        let n = T::from_usize(cols).expect("dimension fits");
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let mut out = av.data().to_vec();
        let mut rstds = Vec::with_capacity(out.len() / cols);
        for row in out.chunks_mut(cols) {
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
            let rstd = (var + eps).sqrt().recip();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x: a, rstd: rstds }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = transpose_kernel(self.value(a).data(), r, c);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a])
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims2(p, "concat"))
            .collect::<Result<_>>()?;
        let value = match axis {
            0 => {
                let cols = dims[0].1;
                if dims.iter().any(|d| d.1 != cols) {
                    return Err(Error::shape("concat", format!("column counts differ: {dims:?}")));
                }
                let rows = dims.iter().map(|d| d.0).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for &p in parts {
                    out.extend_from_slice(self.value(p).data());
                }
                Tensor::new(vec![rows, cols], out)?
            }
            1 => {
                let rows = dims[0].0;
                if dims.iter().any(|d| d.0 != rows) {
                    return Err(Error::shape("concat", format!("row counts differ: {dims:?}")));
                }
                let cols = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        out.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::new(vec![rows, cols], out)?
            }
            _ => return Err(Error::shape("concat", format!("axis {axis} out of range"))),
        };
        self.push(
            "concat",
            value,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// Half-open slice `[start, end)` of a 2-D tensor along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice")?;
        let extent = match axis {
            0 => rows,
            1 => cols,
            _ => return Err(Error::shape("slice", format!("axis {axis} out of range"))),
        };
        if start >= end || end > extent {
            return Err(Error::shape("slice", format!("range {start}..{end} outside 0..{extent}")));
        }
        let av = self.value(a);
        let value = if axis == 0 {
            Tensor::new(vec![end - start, cols], av.data()[start * cols..end * cols].to_vec())?
        } else {
            let mut out = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                out.extend_from_slice(&av.row(r)[start..end]);
            }
            Tensor::new(vec![rows, end - start], out)?
        };
        self.push("slice", value, Op::Slice { x: a, axis, start, end }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = T::from_usize(av.len()).expect("length fits");
        let value = Tensor::scalar(av.sum() / n);
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// Propagates gradients from a scalar `loss` back to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("tape is empty".into()));
        }
        if !self.tracking {
            return Err(Error::Backward("tape was recorded without gradient tracking".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let mut leaf_grads = vec![None; self.nodes.len()];
        for (i, g) in grads.into_iter().enumerate() {
            if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad {
                leaf_grads[i] = g;
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("checked in forward");
                let n = self.value(*b).shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ
                    let da = matmul_t_kernel(gd, bv, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dC
                    let db = matmul_tn_kernel(av, gd, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).expect("shape"));
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("checked in forward");
                let n = self.value(*b).shape()[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].requires_grad {
                    // dA = dC · B
                    let da = matmul_kernel(gd, bv, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = dCᵀ · A
                    let db = matmul_tn_kernel(gd, av, m, n, k);
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], db).expect("shape"));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                self.accumulate(grads, *a, g.clone());
                let gb = if negate { g.map(|v| -v) } else { g.clone() };
                let gb = self.reduce_broadcast(*b, gb);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                if self.nodes[a.0].requires_grad {
                    let da: Vec<T> = gd.iter().enumerate().map(|(i, &gv)| gv * bv[i % nb]).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let full: Vec<T> = gd.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    let full = Tensor::new(g.shape().to_vec(), full).expect("shape");
                    let db = self.reduce_broadcast(*b, full);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let da: Vec<T> = gd.iter().zip(x).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da).expect("shape"));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = *g.shape().last().expect("dims");
                let mut da = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in da.chunks_mut(cols).zip(y.chunks(cols)).zip(gd.chunks(cols)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&yv, &gv)| s + yv * gv);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da).expect("shape"));
            }
            Op::LayerNorm { x, rstd } => {
                let xhat = node.value.data();
                let cols = *g.shape().last().expect("dims");
                let n = T::from_usize(cols).expect("fits");
                let mut dx = vec![T::zero(); xhat.len()];
                for (r, ((dr, xr), gr)) in dx
                    .chunks_mut(cols)
                    .zip(xhat.chunks(cols))
                    .zip(gd.chunks(cols))
                    .enumerate()
                {
                    let mean_g = gr.iter().fold(T::zero(), |s, &v| s + v) / n;
                    let mean_gx = gr.iter().zip(xr).fold(T::zero(), |s, (&gv, &xv)| s + gv * xv) / n;
                    for ((d, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                        *d = rstd[r] * (gv - mean_g - xv * mean_gx);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape).expect("same size"));
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("2-D");
                let da = transpose_kernel(gd, c, r);
                self.accumulate(grads, *a, Tensor::new(vec![r, c], da).expect("shape"));
            }
            Op::Concat { axis, parts } => {
                let (_, total_cols) = g.dims2().expect("2-D");
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2().expect("2-D");
                    let part = if *axis == 0 {
                        gd[offset * total_cols..(offset + pr) * total_cols].to_vec()
                    } else {
                        (0..pr)
                            .flat_map(|r| gd[r * total_cols + offset..r * total_cols + offset + pc].iter().copied())
                            .collect()
                    };
                    offset += if *axis == 0 { pr } else { pc };
                    self.accumulate(grads, p, Tensor::new(vec![pr, pc], part).expect("shape"));
                }
            }
            Op::Slice { x, axis, start, end } => {
                let (rows, cols) = self.value(*x).dims2().expect("2-D");
                let mut dx = vec![T::zero(); rows * cols];
                if *axis == 0 {
                    dx[start * cols..end * cols].copy_from_slice(gd);
                } else {
                    let w = end - start;
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + end].copy_from_slice(&gd[r * w..(r + 1) * w]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, cols], dx).expect("shape"));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n = T::from_usize(self.value(*a).len()).expect("fits");
                self.accumulate(grads, *a, Tensor::full(&shape, gd[0] / n));
            }
        }
    }

    /// Sums a full-shape gradient down to the shape of a broadcast row vector.
    fn reduce_broadcast(&self, b: Var, g: Tensor<T>) -> Tensor<T> {
        let sb = self.shape(b);
        if sb == g.shape() {
            return g;
        }
        let n = sb[0];
        let mut out = vec![T::zero(); n];
        for row in g.data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor::new(vec![n], out).expect("shape")
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zeros when `v` is not on any path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Takes ownership of the gradient for `v`, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_with_identity_selects_rows() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let id = tape.constant(t(&[3, 2], &[1., 0., 0., 1., 0., 0.]));
        let c = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 4., 5.]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3], &[0., 0., 0.]));
        let s = tape.softmax(a).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 4], &[2.5; 4]));
        let y = tape.layer_norm(a).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[5], &[0.3, -1., 2., 7., 0.]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 5]);
    }

    #[test]
    fn squared_error_chain_rule() {
        // (w·x − y)² at w=1, x=2, y=0 → dL/dw = 2·(w·x − y)·x = 8
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[1, 1], &[1.0]));
        let x = tape.constant(t(&[1, 1], &[2.0]));
        let y = tape.constant(t(&[1, 1], &[0.0]));
        let wx = tape.matmul(w, x).unwrap();
        let r = tape.sub(wx, y).unwrap();
        let sq = tape.mul(r, r).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[8.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let unused = tape.param(t(&[3], &[1., 2., 3.]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn reused_value_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap(); // 2x²
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x).data(), &[12.0]);
    }

    #[test]
    fn errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6]));
        let b = tape.constant(t(&[2, 3], &[0.; 6]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        assert!(matches!(
            tape.apply("conv3d", &[a], &OpAttrs::default()),
            Err(Error::UnsupportedOp(_))
        ));
        assert!(matches!(tape.backward(a), Err(Error::Backward(_))));
        let big = tape.constant(t(&[1], &[1e300]));
        assert!(matches!(tape.mul(big, big), Err(Error::NonFinite { .. })));
        let empty = Tape::<f64>::new();
        assert!(empty.backward(Var(0)).is_err());
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.param(t(&[1], &[1.0]));
        let s = tape.sum(x).unwrap();
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn apply_dispatches_by_name() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let attrs = OpAttrs {
            axis: Some(1),
            range: Some((1, 2)),
            ..Default::default()
        };
        let s = tape.apply("slice", &[a], &attrs).unwrap();
        assert_eq!(tape.value(s).data(), &[2., 4.]);
        let sc = tape
            .apply("scale", &[a], &OpAttrs { scale: Some(2.0), ..Default::default() })
            .unwrap();
        assert_eq!(tape.value(sc).data(), &[2., 4., 6., 8.]);
    }
}
