use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Norm below which `l2_normalize` returns zeros instead of dividing.
pub const L2_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var, usize),
    Tanh(Var),
    Abs(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    L2Normalize(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    LogClamp(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Softmax(..) => "softmax",
            Op::Tanh(..) => "tanh",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Gather(..) => "gather",
            Op::LogClamp(..) => "log",
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single forward computation recorded for reverse-mode differentiation.
///
/// Parameters are borrowed from their [`ParamStore`], so the store cannot be
/// mutated until the graph is dropped.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: Vec<(Var, ParamId)>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty() && self.params.is_empty()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

struct MatMulDims {
    out: Vec<usize>,
    batch: usize,
    m: usize,
    n: usize,
    p: usize,
    a_batched: bool,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let err = || TensorError::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (a_lead, a_mat) = a.split_at(a.len() - 2);
    let (b_lead, b_mat) = b.split_at(b.len() - 2);
    if a_mat[1] != b_mat[0] {
        return Err(err());
    }
    let (lead, a_batched, b_batched) = if a_lead == b_lead {
        (a_lead, true, true)
    } else if b_lead.is_empty() {
        (a_lead, true, false)
    } else if a_lead.is_empty() {
        (b_lead, false, true)
    } else {
        return Err(err());
    };
    let mut out = lead.to_vec();
    out.extend([a_mat[0], b_mat[1]]);
    Ok(MatMulDims {
        out,
        batch: lead.iter().product(),
        m: a_mat[0],
        n: a_mat[1],
        p: b_mat[1],
        a_batched,
        b_batched,
    })
}

impl<'p> Default for Graph<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Registers a trainable parameter without copying it.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((v, id));
        v
    }

    /// Registers a parameter as a constant: no gradient is collected for it.
    pub fn frozen(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor {
            shape: av.shape().to_vec(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a rank-1 `bias` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let n = bs[0];
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.map(x, |v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant of identical shape (masks, dropout).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if c.shape() != self.shape(x) {
            return Err(TensorError::Shape {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .collect();
        let out = Tensor {
            shape: c.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::MulConst(x, c), rg)
    }

    /// Batched matrix product over the trailing two axes. Leading axes must
    /// match, or one operand must be a plain matrix which is broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = matmul_dims(self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; d.batch * d.m * d.p];
        for bi in 0..d.batch {
            let ao = if d.a_batched { bi * d.m * d.n } else { 0 };
            let bo = if d.b_batched { bi * d.n * d.p } else { 0 };
            let co = bi * d.m * d.p;
            for i in 0..d.m {
                let crow = &mut out[co + i * d.p..co + (i + 1) * d.p];
                for k in 0..d.n {
                    let av = ad[ao + i * d.n + k];
                    let brow = &bd[bo + k * d.p..bo + (k + 1) * d.p];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor {
                shape: d.out,
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = Tensor::new(shape.to_vec(), self.value(x).data().to_vec()).map_err(|_| {
            TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            }
        })?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(TensorError::Invalid(format!(
                    "bad permutation {perm:?} for rank {rank}"
                )));
            }
            seen[p] = true;
        }
        if perm.len() != rank {
            return Err(TensorError::Invalid(format!(
                "bad permutation {perm:?} for rank {rank}"
            )));
        }
        let xv = self.value(x);
        let (data, shape) = permute_data(xv.data(), xv.shape(), perm);
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Permute(x, perm.to_vec()), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(TensorError::Axis { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Softmax along `axis`. Positions where `mask` is false get probability
    /// zero; rows with no unmasked position are all zeros.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if let Some(m) = mask {
            if m.len() != self.value(x).len() {
                return Err(TensorError::Shape {
                    op: "softmax_mask",
                    lhs: shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mut max = f64::NEG_INFINITY;
                for i in 0..n {
                    if keep(idx(i)) {
                        max = max.max(xd[idx(i)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for i in 0..n {
                    if keep(idx(i)) {
                        let e = (xd[idx(i)] - max).exp();
                        out[idx(i)] = e;
                        total += e;
                    }
                }
                for i in 0..n {
                    out[idx(i)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data: out }, Op::Softmax(x, axis), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, f64::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, f64::abs);
        let rg = self.rg(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] += xd[(o * n + i) * inner + j];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::SumAxis(x, axis),
            rg,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis];
                let d = self.value(*p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(Tensor { shape, data: out }, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// `len` entries of `x` along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "slice {start}..{} out of range for extent {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Slice { x, axis, start },
            rg,
        )
    }

    /// Scales each vector along the last axis to unit Euclidean norm. Vectors
    /// with norm below [`L2_EPS`] map to zeros.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&1);
        let mut norms = Vec::with_capacity(xv.len() / d);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < L2_EPS {
                norms.push(0.0);
                out.extend(std::iter::repeat_n(0.0, d));
            } else {
                norms.push(norm);
                out.extend(row.iter().map(|v| v / norm));
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data: out }, Op::L2Normalize(x, norms), rg)
    }

    /// Rows of a `[V, d]` table, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "gather needs a matrix, got {ts:?}"
            )));
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather of zero rows".into()));
        }
        let (rows, d) = (ts[0], ts[1]);
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Invalid(format!(
                    "row {id} out of range for table of {rows}"
                )));
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data: out,
            },
            Op::Gather(table, ids.to_vec()),
            rg,
        )
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where clamped.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out = self.map(x, |v| v.max(floor).ln());
        let rg = self.rg(&[x]);
        self.push(out, Op::LogClamp(x, floor), rg)
    }

    // Composite helpers.

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        self.abs(d)
    }

    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or(TensorError::Axis {
                axis,
                rank: self.shape(x).len(),
            })?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)` so that
    /// inference (`training == false`) is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(x, Tensor { shape, data: mask })
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf that requires grad receives a gradient; registered
    /// parameters not reachable from `loss` receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| v.is_nan()) {
                return Err(TensorError::NanGradient {
                    op: node.op.name(),
                });
            }
            self.propagate(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                let t = Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g,
                };
                out.leaves.insert(Var(idx), t);
            }
        }

        for &(v, id) in &self.params {
            let g = out
                .leaves
                .get(&v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            match out.params.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data.iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.params.insert(id, g);
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| {
                    let n = s.len();
                    for (i, gv) in g.iter().enumerate() {
                        s[i % n] += gv;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c));
            }
            Op::MulConst(x, c) => {
                acc(*x, &mut |s| {
                    for ((s, g), c) in s.iter_mut().zip(g).zip(c.data()) {
                        *s += g * c;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let d = matmul_dims(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * d.m * d.n } else { 0 };
                        let bo = if d.b_batched { bi * d.n * d.p } else { 0 };
                        let co = bi * d.m * d.p;
                        for i in 0..d.m {
                            let grow = &g[co + i * d.p..co + (i + 1) * d.p];
                            for k in 0..d.n {
                                let brow = &bd[bo + k * d.p..bo + (k + 1) * d.p];
                                let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                s[ao + i * d.n + k] += dot;
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * d.m * d.n } else { 0 };
                        let bo = if d.b_batched { bi * d.n * d.p } else { 0 };
                        let co = bi * d.m * d.p;
                        for i in 0..d.m {
                            let grow = &g[co + i * d.p..co + (i + 1) * d.p];
                            for k in 0..d.n {
                                let av = ad[ao + i * d.n + k];
                                let srow = &mut s[bo + k * d.p..bo + (k + 1) * d.p];
                                for (sv, gv) in srow.iter_mut().zip(grow) {
                                    *sv += av * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                acc(*x, &mut |s| s.iter_mut().zip(&back).for_each(|(s, g)| *s += g));
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let dot: f64 = (0..n).map(|i| y[idx(i)] * g[idx(i)]).sum();
                            for i in 0..n {
                                s[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        let sign = if xv[i] > 0.0 {
                            1.0
                        } else if xv[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        s[i] += g[i] * sign;
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                s[(o * n + i) * inner + j] += g[o * inner + j];
                            }
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[*axis];
                    acc(*p, &mut |s| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut s[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let dst = &mut s[(o * n + start) * inner..(o * n + start + len) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::L2Normalize(x, norms) => {
                let d = node.value.len() / norms.len();
                acc(*x, &mut |s| {
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..d {
                            s[r * d + i] += (gr[i] - yr[i] * dot) / norm;
                        }
                    }
                });
            }
            Op::Gather(table, ids) => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        let dst = &mut s[id * d..(id + 1) * d];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::LogClamp(x, floor) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if xv[i] > *floor {
                            s[i] += g[i] / xv[i];
                        }
                    }
                });
            }
        }
    }
}
