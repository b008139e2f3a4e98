//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so the node vector is already a topological
//! order and backprop is a single reverse sweep.

use super::tensor::{
    broadcast_binary, gemm_nt_acc, gemm_tn_acc, inverse_permutation, matmul,
    matmul_dims, permute, reduce_to_shape, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Sqrt(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    SumAxis(Var, usize),
    SumAll(Var),
    BroadcastTo(Var),
    Softmax(Var),
    LogSumExp {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// Split a shape around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // untracked results are recorded as plain constants
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary("div", self.value(a), self.value(b), |x, y| x / y)?;
        self.push("div", v, Op::Div(a, b), &[a, b])
    }

    /// Matrix product of rank-2 or rank-3 operands; a rank-2 side is shared
    /// across the batch of the other.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: self.shape(x).to_vec(),
                rhs: axes.to_vec(),
            });
        }
        let v = permute(self.value(x), axes);
        self.push("permute", v, Op::Permute(x, axes.to_vec()), &[x])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshaped(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::from_parts(out_shape, data);
        self.push("concat", v, Op::Concat(xs.to_vec(), axis), xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::from_parts(out_shape, data);
        self.push("slice", v, Op::Slice { x, axis, start }, &[x])
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        if self.shape(x).get(axis) != Some(&total) {
            return Err(Error::Shape {
                op: "split",
                lhs: self.shape(x).to_vec(),
                rhs: sizes.to_vec(),
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary("power", x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// `max(x, floor)`; gradient flows only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    /// Sum over one axis, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("sum axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let v = Tensor::from_parts(out_shape, data);
        self.push("sum", v, Op::SumAxis(x, axis), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid(format!("mean axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let target = Tensor::zeros(shape);
        let v = broadcast_binary("broadcast", self.value(x), &target, |a, _| a)?;
        if v.shape() != shape {
            return Err(Error::Shape {
                op: "broadcast",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.push("broadcast", v, Op::BroadcastTo(x), &[x])
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("softmax", v, Op::Softmax(x), &[x])
    }

    /// Log-sum-exp over the last axis. `mask[j] == false` drops column `j`
    /// of every row (the mask has one entry per element of `x`).
    pub fn logsumexp(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        if let Some(m) = &mask {
            if m.len() != t.numel() {
                return Err(Error::Shape {
                    op: "logsumexp",
                    lhs: t.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = Vec::with_capacity(t.numel() / n);
        for (r, row) in t.data().chunks(n).enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * n + j]);
            let m = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..n).filter(|&j| keep(j)).map(|j| (row[j] - m).exp()).sum();
            out.push(m + s.ln());
        }
        let mut shape = t.shape()[..t.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let v = Tensor::from_parts(shape, out);
        self.push("logsumexp", v, Op::LogSumExp { x, mask }, &[x])
    }

    /// Normalize the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.numel() / n);
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("layer_norm", v, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Select rows (first-axis slices) by index; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape()[0];
        let row_len = t.numel() / rows;
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather_rows: index out of range for {} rows",
                rows
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * row_len);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let v = Tensor::from_parts(shape, data);
        self.push("gather_rows", v, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Reverse sweep from a scalar output. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::Backprop(format!(
                "output must be a scalar, got shape {:?}",
                self.shape(out)
            )));
        }
        if !self.nodes[out.0].requires_grad {
            return Err(Error::Backprop(
                "output has no recorded trace to differentiate".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::from_parts(self.shape(out).to_vec(), vec![1.0]));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to_shape(g, val(*a).shape())),
                (*b, reduce_to_shape(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to_shape(g, val(*a).shape())),
                (*b, reduce_to_shape(&g.map(|v| -v), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let ga = broadcast_binary("mul", g, val(*b), |x, y| x * y)?;
                let gb = broadcast_binary("mul", g, val(*a), |x, y| x * y)?;
                vec![
                    (*a, reduce_to_shape(&ga, val(*a).shape())),
                    (*b, reduce_to_shape(&gb, val(*b).shape())),
                ]
            }
            Op::Div(a, b) => {
                let ga = broadcast_binary("div", g, val(*b), |x, y| x / y)?;
                // d(a/b)/db = -y / b
                let gy = broadcast_binary("div", &g.zip_map(y, |x, y| -x * y), val(*b), |x, y| x / y)?;
                vec![
                    (*a, reduce_to_shape(&ga, val(*a).shape())),
                    (*b, reduce_to_shape(&gy, val(*b).shape())),
                ]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let d = matmul_dims(ta.shape(), tb.shape())?;
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
                for bi in 0..d.batch {
                    let ao = if d.a_batched { bi * mk } else { 0 };
                    let bo = if d.b_batched { bi * kn } else { 0 };
                    let gs = &g.data()[bi * mn..(bi + 1) * mn];
                    gemm_nt_acc(gs, &tb.data()[bo..bo + kn], &mut ga[ao..ao + mk], d.m, d.n, d.k);
                    gemm_tn_acc(&ta.data()[ao..ao + mk], gs, &mut gb[bo..bo + kn], d.m, d.k, d.n);
                }
                vec![
                    (*a, Tensor::from_parts(ta.shape().to_vec(), ga)),
                    (*b, Tensor::from_parts(tb.shape().to_vec(), gb)),
                ]
            }
            Op::Permute(x, axes) => vec![(*x, permute(g, &inverse_permutation(axes)))],
            Op::Reshape(x) => vec![(*x, g.reshaped(val(*x).shape())?)],
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_extents(g.shape(), *axis);
                let mut res = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).shape()[*axis];
                    let mut data = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    res.push((x, Tensor::from_parts(val(x).shape().to_vec(), data)));
                    offset += n;
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = axis_extents(xs, *axis);
                let len = g.shape()[*axis];
                let mut data = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), data))]
            }
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Gelu(x) => vec![(*x, g.zip_map(val(*x), |g, x| g * gelu_parts(x).1))],
            Op::Exp(x) => vec![(*x, g.zip_map(y, |g, y| g * y))],
            Op::Log(x) => vec![(*x, g.zip_map(val(*x), |g, x| g / x))],
            Op::Powf(x, p) => {
                let p = *p;
                vec![(*x, g.zip_map(val(*x), |g, x| g * p * x.powf(p - 1.0)))]
            }
            Op::Sqrt(x) => vec![(*x, g.zip_map(y, |g, y| g * 0.5 / y))],
            Op::Scale(x, c) => {
                let c = *c;
                vec![(*x, g.map(|v| v * c))]
            }
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::ClampMin(x, floor) => {
                let f = *floor;
                vec![(*x, g.zip_map(val(*x), |g, x| if x > f { g } else { 0.0 }))]
            }
            Op::SumAxis(x, axis) => {
                let xs = val(*x).shape();
                let (outer, n, inner) = axis_extents(xs, *axis);
                let mut data = Vec::with_capacity(val(*x).numel());
                for o in 0..outer {
                    let row = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        data.extend_from_slice(row);
                    }
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), data))]
            }
            Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::BroadcastTo(x) => vec![(*x, reduce_to_shape(g, val(*x).shape()))],
            Op::Softmax(x) => {
                let n = *y.shape().last().unwrap();
                let mut data = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                vec![(*x, Tensor::from_parts(y.shape().to_vec(), data))]
            }
            Op::LogSumExp { x, mask } => {
                let t = val(*x);
                let n = *t.shape().last().unwrap();
                let mut data = Vec::with_capacity(t.numel());
                for (r, row) in t.data().chunks(n).enumerate() {
                    let lse = y.data()[r];
                    let gr = g.data()[r];
                    for (j, &v) in row.iter().enumerate() {
                        let keep = mask.as_ref().is_none_or(|m| m[r * n + j]);
                        data.push(if keep { gr * (v - lse).exp() } else { 0.0 });
                    }
                }
                vec![(*x, Tensor::from_parts(t.shape().to_vec(), data))]
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *y.shape().last().unwrap();
                let mut data = Vec::with_capacity(y.numel());
                for ((yr, gr), &is) in y.data().chunks(n).zip(g.data().chunks(n)).zip(inv_std) {
                    let gm = gr.iter().sum::<f64>() / n as f64;
                    let gym = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    data.extend(gr.iter().zip(yr).map(|(g, y)| is * (g - gm - y * gym)));
                }
                vec![(*x, Tensor::from_parts(y.shape().to_vec(), data))]
            }
            Op::GatherRows(x, idx) => {
                let t = val(*x);
                let row_len = t.numel() / t.shape()[0];
                let mut data = vec![0.0; t.numel()];
                for (k, &r) in idx.iter().enumerate() {
                    let src = &g.data()[k * row_len..(k + 1) * row_len];
                    for (d, s) in data[r * row_len..(r + 1) * row_len].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![(*x, Tensor::from_parts(t.shape().to_vec(), data))]
            }
        };
        Ok(out)
    }
}

/// Compare analytic gradients against central differences for every input
/// tensor of `f`. Returns `max |analytic - numeric| / max(1, |analytic|)`.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!("gradcheck eps {eps} outside (0, 1e-3]")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let analytic: Vec<Tensor> = if g.requires_grad(out) {
        g.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    } else {
        inputs.iter().map(|x| Tensor::zeros(x.shape())).collect()
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    let mut component = 0;
    for t in 0..inputs.len() {
        for j in 0..inputs[t].numel() {
            let orig = inputs[t].data()[j];
            probe[t].data_mut()[j] = orig + eps;
            let plus = eval(&probe);
            probe[t].data_mut()[j] = orig - eps;
            let minus = eval(&probe);
            probe[t].data_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(e), _) | (_, Err(e)) if !matches!(e, Error::NonFinite { .. }) => return Err(e),
                _ => return Err(Error::GradcheckNonFinite { component }),
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            component += 1;
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`gradcheck_many`].
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    gradcheck_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}
