//! Define-by-run reverse-mode tape.
//!
//! Every operation evaluates eagerly, appends a node holding its output and
//! the inputs needed for its backward rule, and returns a [`Var`] handle.
//! Nodes are appended in evaluation order, so the node list is already
//! topologically sorted and backward is a single reverse sweep.

use std::collections::BTreeMap;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Sqrt(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { x: Var, v: Var },
    SubRow { x: Var, v: Var },
    MulRow { x: Var, v: Var },
    Scale(Var, f64),
    AddScalar(Var),
    MulByScalar { x: Var, s: Var },
    MeanRows(Var),
    VarRows(Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    SqDist { q: Var, c: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    WeightedSum { inputs: Vec<Var>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not
    /// influence the loss or does not require grad.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: BTreeMap<String, Var>,
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// A free-standing differentiable leaf, not tied to a [`ParamSet`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Binds the parameter at `path`. Repeated calls return the same node,
    /// so gradients from every use accumulate on one leaf.
    pub fn param(&mut self, params: &ParamSet, path: &str) -> Result<Var> {
        if let Some(v) = self.bindings.get(path) {
            return Ok(*v);
        }
        let t = params.get(path)?;
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        value = value.with_requires_grad(true);
        let v = self.push_leaf(value, true);
        self.bindings.insert(path.to_string(), v);
        Ok(v)
    }

    /// Copies `v` into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone().with_requires_grad(false);
        self.constant(t)
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output from {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn row_vector(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (r, c) = self.dims2(x)?;
        if self.shape(v) != [c] {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        Ok((r, c))
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.push(name, out, op, &[x])
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn rowwise(
        &mut self,
        name: &'static str,
        x: Var,
        v: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (r, c) = self.row_vector(name, x, v)?;
        let (tx, tv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        let mut data = Vec::with_capacity(r * c);
        for row in tx.data().chunks_exact(c) {
            data.extend(row.iter().zip(tv.data()).map(|(&p, &q)| f(p, q)));
        }
        let out = Tensor::new(vec![r, c], data)?;
        self.push(name, out, op, &[x, v])
    }

    /// `x·w + b` for `x: [B, Cin]`, `w: [Cin, Cout]`, `b: [Cout]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, cin) = self.dims2(x)?;
        let (win, cout) = self.dims2(w)?;
        if cin != win || self.shape(b) != [cout] {
            return Err(Error::Dimension {
                op: "affine",
                lhs: self.shape(x).to_vec(),
                rhs: [self.shape(w), self.shape(b)].concat(),
            });
        }
        let mut out = Vec::with_capacity(rows * cout);
        let bias = self.nodes[b.0].value.data();
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        kernels::mm_acc(
            &mut out,
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            rows,
            cin,
            cout,
        );
        let out = Tensor::new(vec![rows, cout], out)?;
        self.push("affine", out, Op::Affine { x, w, b }, &[x, w, b])
    }

    /// `a·b` for `a: [R, K]`, `b: [K, C]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims2(a)?;
        let (k2, c) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; r * c];
        kernels::mm_acc(
            &mut out,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            r,
            k,
            c,
        );
        let out = Tensor::new(vec![r, c], out)?;
        self.push("matmul", out, Op::MatMul { a, b }, &[a, b])
    }

    /// `a·bᵀ` for `a: [R, K]`, `b: [C, K]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims2(a)?;
        let (c, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_bt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; r * c];
        kernels::mm_bt_acc(
            &mut out,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            r,
            k,
            c,
        );
        let out = Tensor::new(vec![r, c], out)?;
        self.push("matmul_bt", out, Op::MatMulBt { a, b }, &[a, b])
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |a| if a > 0.0 { a } else { 0.0 })
    }

    /// Elementwise `ln(1 + eˣ)` in the overflow-free form.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, Op::Softplus(x), scalar::softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&a| a < 0.0) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        self.map("sqrt", x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, Op::Div(a, b), |p, q| p / q)
    }

    /// `x[i, c] + v[c]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.rowwise("add_row", x, v, Op::AddRow { x, v }, |p, q| p + q)
    }

    /// `x[i, c] - v[c]`.
    pub fn sub_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.rowwise("sub_row", x, v, Op::SubRow { x, v }, |p, q| p - q)
    }

    /// `x[i, c] * v[c]`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.rowwise("mul_row", x, v, Op::MulRow { x, v }, |p, q| p * q)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, c), |a| a * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", x, Op::AddScalar(x), |a| a + c)
    }

    /// `x * s` where `s` holds a single element.
    pub fn mul_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let k = self.value(s).item()?;
        let src = self.value(x);
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|a| a * k).collect())?;
        self.push("mul_by_scalar", out, Op::MulByScalar { x, s }, &[x, s])
    }

    /// Per-column mean over rows: `[B, C] -> [C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (b, c) = self.dims2(x)?;
        if b == 0 {
            return Err(Error::EmptyReduction("mean_rows"));
        }
        let out = kernels::col_mean(self.value(x).data(), b, c);
        self.push("mean_rows", Tensor::vector(out), Op::MeanRows(x), &[x])
    }

    /// Per-column population variance over rows: `[B, C] -> [C]`.
    pub fn var_rows(&mut self, x: Var) -> Result<Var> {
        let (b, c) = self.dims2(x)?;
        if b == 0 {
            return Err(Error::EmptyReduction("var_rows"));
        }
        let data = self.value(x).data();
        let mean = kernels::col_mean(data, b, c);
        let mut var = vec![0.0; c];
        for row in data.chunks_exact(c) {
            for ((acc, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        self.push("var_rows", Tensor::vector(var), Op::VarRows(x), &[x])
    }

    /// Per-column `(mean, population variance)` over the sample axis.
    pub fn moments(&mut self, x: Var) -> Result<(Var, Var)> {
        Ok((self.mean_rows(x)?, self.var_rows(x)?))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::EmptyReduction("mean"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Rows scaled to unit L2 norm, `x / sqrt(|x|² + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let data = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in data.chunks_exact(c) {
            let n = (row.iter().map(|a| a * a).sum::<f64>() + eps).sqrt();
            norms.push(n);
            out.extend(row.iter().map(|a| a / n));
        }
        let out = Tensor::new(vec![r, c], out)?;
        self.push("normalize_rows", out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Pairwise squared distances `out[i, j] = |q_i - c_j|²`.
    pub fn sq_dist(&mut self, q: Var, c: Var) -> Result<Var> {
        let (nq, k) = self.dims2(q)?;
        let (nc, k2) = self.dims2(c)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "sq_dist",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(c).to_vec(),
            });
        }
        let (tq, tc) = (self.value(q).data(), self.value(c).data());
        let mut out = Vec::with_capacity(nq * nc);
        for qi in tq.chunks_exact(k) {
            for cj in tc.chunks_exact(k) {
                out.push(qi.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum());
            }
        }
        let out = Tensor::new(vec![nq, nc], out)?;
        self.push("sq_dist", out, Op::SqDist { q, c }, &[q, c])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, n) = self.dims2(logits)?;
        if labels.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if b == 0 {
            return Err(Error::EmptyReduction("cross_entropy"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::Index(format!("label {bad} out of range for {n} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * n);
        let mut loss = 0.0;
        for (row, &y) in z.chunks_exact(n).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + se.ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        loss /= b as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if start + len > r {
            return Err(Error::Index(format!(
                "rows {start}..{} of a {r}-row matrix",
                start + len
            )));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `Σ_j weights[j] · inputs[j]` with constant weights.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: &[f64]) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => *v,
            None => return Err(Error::EmptyReduction("weighted_sum")),
        };
        if inputs.len() != weights.len() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                lhs: vec![inputs.len()],
                rhs: vec![weights.len()],
            });
        }
        for v in inputs {
            self.same_shape("weighted_sum", first, *v)?;
        }
        let mut out = vec![0.0; self.value(first).numel()];
        for (v, &w) in inputs.iter().zip(weights) {
            for (o, &a) in out.iter_mut().zip(self.value(*v).data()) {
                *o += w * a;
            }
        }
        let out = Tensor::new(self.shape(first).to_vec(), out)?;
        let op = Op::WeightedSum {
            inputs: inputs.to_vec(),
            weights: weights.to_vec(),
        };
        self.push("weighted_sum", out, op, inputs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar loss of shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep from `loss`, accumulating into the `grad` buffers of
    /// every bound parameter that the loss depends on.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (path, v) in &self.bindings {
            if let Some(g) = grads.of(*v) {
                params.get_mut(path)?.accumulate_grad(g);
            }
        }
        Ok(())
    }

    /// Paths bound on this tape, in lexicographic order.
    pub fn bound_paths(&self) -> impl Iterator<Item = &String> {
        self.bindings.keys()
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(buf);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (rows, cin) = self.nodes[x.0].value.dims2().unwrap();
                let cout = self.nodes[b.0].value.numel();
                acc(*x, &mut |d| kernels::mm_bt_acc(d, g, val(*w), rows, cout, cin));
                acc(*w, &mut |d| kernels::mm_at_acc(d, val(*x), g, rows, cin, cout));
                acc(*b, &mut |d| kernels::col_sum_acc(d, g, cout));
            }
            Op::MatMul { a, b } => {
                let (r, k) = self.nodes[a.0].value.dims2().unwrap();
                let c = self.nodes[b.0].value.dims2().unwrap().1;
                acc(*a, &mut |d| kernels::mm_bt_acc(d, g, val(*b), r, c, k));
                acc(*b, &mut |d| kernels::mm_at_acc(d, val(*a), g, r, k, c));
            }
            Op::MatMulBt { a, b } => {
                let (r, k) = self.nodes[a.0].value.dims2().unwrap();
                let c = self.nodes[b.0].value.dims2().unwrap().0;
                acc(*a, &mut |d| kernels::mm_acc(d, g, val(*b), r, c, k));
                acc(*b, &mut |d| kernels::mm_at_acc(d, g, val(*a), r, c, k));
            }
            Op::Relu(x) => acc(*x, &mut |d| {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(val(*x)) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }),
            Op::Softplus(x) => acc(*x, &mut |d| {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(val(*x)) {
                    *d += gi * scalar::sigmoid(xi);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |d| {
                for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                    *d += gi * yi;
                }
            }),
            Op::Sqrt(x) => acc(*x, &mut |d| {
                for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                    *d += gi / (2.0 * yi);
                }
            }),
            Op::Add(a, b) => {
                acc(*a, &mut |d| kernels::axpy(d, g, 1.0));
                acc(*b, &mut |d| kernels::axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| kernels::axpy(d, g, 1.0));
                acc(*b, &mut |d| kernels::axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |d| {
                    for ((d, &gi), &bi) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &gi), &ai) in d.iter_mut().zip(g).zip(val(*a)) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                acc(*a, &mut |d| {
                    for ((d, &gi), &bi) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d += gi / bi;
                    }
                });
                acc(*b, &mut |d| {
                    for (((d, &gi), &ai), &bi) in d.iter_mut().zip(g).zip(val(*a)).zip(val(*b)) {
                        *d -= gi * ai / (bi * bi);
                    }
                });
            }
            Op::AddRow { x, v } | Op::SubRow { x, v } => {
                let sign = if matches!(node.op, Op::SubRow { .. }) { -1.0 } else { 1.0 };
                let c = self.nodes[v.0].value.numel();
                acc(*x, &mut |d| kernels::axpy(d, g, 1.0));
                acc(*v, &mut |d| {
                    for row in g.chunks_exact(c) {
                        kernels::axpy(d, row, sign);
                    }
                });
            }
            Op::MulRow { x, v } => {
                let c = self.nodes[v.0].value.numel();
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((d, &gi), &vi) in drow.iter_mut().zip(grow).zip(val(*v)) {
                            *d += gi * vi;
                        }
                    }
                });
                acc(*v, &mut |d| {
                    for (grow, xrow) in g.chunks_exact(c).zip(val(*x).chunks_exact(c)) {
                        for ((d, &gi), &xi) in d.iter_mut().zip(grow).zip(xrow) {
                            *d += gi * xi;
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| kernels::axpy(d, g, *c)),
            Op::AddScalar(x) => acc(*x, &mut |d| kernels::axpy(d, g, 1.0)),
            Op::MulByScalar { x, s } => {
                let k = val(*s)[0];
                acc(*x, &mut |d| kernels::axpy(d, g, k));
                acc(*s, &mut |d| {
                    d[0] += g.iter().zip(val(*x)).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::MeanRows(x) => {
                let (b, c) = self.nodes[x.0].value.dims2().unwrap();
                let inv = 1.0 / b as f64;
                acc(*x, &mut |d| {
                    for drow in d.chunks_exact_mut(c) {
                        kernels::axpy(drow, g, inv);
                    }
                });
            }
            Op::VarRows(x) => {
                let (b, c) = self.nodes[x.0].value.dims2().unwrap();
                let xs = val(*x);
                let mean = kernels::col_mean(xs, b, c);
                let k = 2.0 / b as f64;
                acc(*x, &mut |d| {
                    for (drow, xrow) in d.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                        for (((d, &gi), &xi), &m) in drow.iter_mut().zip(g).zip(xrow).zip(&mean) {
                            *d += gi * k * (xi - m);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::NormalizeRows { x, norms } => {
                let c = self.nodes[x.0].value.dims2().unwrap().1;
                acc(*x, &mut |d| {
                    for (((drow, grow), yrow), n) in d
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(y.chunks_exact(c))
                        .zip(norms)
                    {
                        let yg: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (gi - yi * yg) / n;
                        }
                    }
                });
            }
            Op::SqDist { q, c } => {
                let (nq, k) = self.nodes[q.0].value.dims2().unwrap();
                let nc = self.nodes[c.0].value.dims2().unwrap().0;
                let (tq, tc) = (val(*q), val(*c));
                acc(*q, &mut |d| {
                    for i in 0..nq {
                        for j in 0..nc {
                            let gij = 2.0 * g[i * nc + j];
                            for t in 0..k {
                                d[i * k + t] += gij * (tq[i * k + t] - tc[j * k + t]);
                            }
                        }
                    }
                });
                acc(*c, &mut |d| {
                    for i in 0..nq {
                        for j in 0..nc {
                            let gij = 2.0 * g[i * nc + j];
                            for t in 0..k {
                                d[j * k + t] -= gij * (tq[i * k + t] - tc[j * k + t]);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = self.nodes[logits.0].value.dims2().unwrap().1;
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |d| {
                    for ((drow, prow), &y) in d.chunks_exact_mut(n).zip(probs.chunks_exact(n)).zip(labels) {
                        for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let target = if j == y { 1.0 } else { 0.0 };
                            *d += scale * (p - target);
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = self.nodes[x.0].value.dims2().unwrap().1;
                let off = start * c;
                acc(*x, &mut |d| kernels::axpy(&mut d[off..off + g.len()], g, 1.0));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(*p, &mut |d| kernels::axpy(d, &g[off..off + len], 1.0));
                    off += len;
                }
            }
            Op::WeightedSum { inputs, weights } => {
                for (v, &w) in inputs.iter().zip(weights) {
                    acc(*v, &mut |d| kernels::axpy(d, g, w));
                }
            }
        }
    }
}

pub(crate) mod scalar {
    pub fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }
}

mod kernels {
    /// `out[r, c] += a[r, k] · b[k, c]`
    pub fn mm_acc(out: &mut [f64], a: &[f64], b: &[f64], r: usize, k: usize, c: usize) {
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for (t, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[t * c..(t + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    }

    /// `out[r, c] += a[r, k] · b[c, k]ᵀ`
    pub fn mm_bt_acc(out: &mut [f64], a: &[f64], b: &[f64], r: usize, k: usize, c: usize) {
        for i in 0..r {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..c {
                let brow = &b[j * k..(j + 1) * k];
                out[i * c + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }

    /// `out[k, c] += a[r, k]ᵀ · b[r, c]`
    pub fn mm_at_acc(out: &mut [f64], a: &[f64], b: &[f64], r: usize, k: usize, c: usize) {
        for i in 0..r {
            let brow = &b[i * c..(i + 1) * c];
            for (t, &ait) in a[i * k..(i + 1) * k].iter().enumerate() {
                if ait == 0.0 {
                    continue;
                }
                let orow = &mut out[t * c..(t + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += ait * bv;
                }
            }
        }
    }

    pub fn col_sum_acc(out: &mut [f64], g: &[f64], c: usize) {
        for row in g.chunks_exact(c) {
            axpy(out, row, 1.0);
        }
    }

    pub fn col_mean(x: &[f64], b: usize, c: usize) -> Vec<f64> {
        let mut m = vec![0.0; c];
        col_sum_acc(&mut m, x, c);
        m.iter_mut().for_each(|v| *v /= b as f64);
        m
    }

    pub fn axpy(y: &mut [f64], x: &[f64], a: f64) {
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi += a * xi;
        }
    }
}
