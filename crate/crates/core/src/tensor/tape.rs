use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use super::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Result, Tensor2D, TensorError};

/// Added to the per-row variance in [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Identifies a trainable parameter leaf. Gradients are keyed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Reduction direction for [`Tape::mean_over`] and [`Tape::max_over`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Collapse the rows: `r x c -> 1 x c`.
    Rows,
    /// Collapse the columns: `r x c -> r x 1`.
    Cols,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Affine(usize, f64),
    RowSoftmax(usize),
    LogSoftmaxRows(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Gelu(usize),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    MeanOver { x: usize, axis: Axis },
    MaxOver { x: usize, axis: Axis, argmax: Vec<usize> },
    SumAll(usize),
    NormalizeRows { x: usize, norms: Vec<f64>, clamped: Vec<bool> },
    MaskedRowLse { x: usize, mask: Vec<bool> },
    Gather { x: usize, idx: Vec<(usize, usize)> },
    GatherRows { x: usize, ids: Vec<usize> },
    SoftDtw { cost: usize, gamma: f64, r: Vec<f64> },
}

struct Node {
    value: Tensor2D,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Records one forward pass. Not `Sync`: a tape belongs to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar root with respect to parameter leaves.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor2D>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor2D> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor2D)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    /// Adds `scale * other` into `self`, creating entries as needed.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in other.iter() {
            match self.map.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    self.map.insert(id, g.map(|v| v * scale));
                }
            }
        }
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor2D) {
        self.map.insert(id, grad);
    }
}

fn shape_err(op: &'static str, lhs: &Tensor2D, rhs: &Tensor2D) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.shape(),
        rhs: rhs.shape(),
    }
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn logsumexp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `-gamma * ln(sum(exp(-x / gamma)))`, stable for infinite arguments.
pub(crate) fn softmin(vals: &[f64], gamma: f64) -> f64 {
    let neg = vals.iter().map(|v| -v / gamma);
    -gamma * logsumexp(neg)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Borrow the forward value of `v`.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor2D> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn push(&self, value: Tensor2D, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(op_name(&op)));
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn leaf(&self, value: Tensor2D, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: param.is_some(),
            param,
        });
        Var(nodes.len() - 1)
    }

    /// Trainable leaf; its gradient appears in [`Gradients`] under `id`.
    pub fn param(&self, id: ParamId, value: &Tensor2D) -> Var {
        self.leaf(value.clone(), Some(id))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor2D) -> Var {
        self.leaf(value, None)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            x.matmul(y)?
        };
        self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `a * b^T`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.cols() != y.cols() {
                return Err(shape_err("matmul_nt", x, y));
            }
            let mut out = Tensor2D::zeros(x.rows(), y.rows());
            matmul_nt_acc(x.data(), y.data(), out.data_mut(), x.rows(), x.cols(), y.rows());
            out
        };
        self.push(out, Op::MatMulNT(a.0, b.0), &[a.0, b.0])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a.0), &[a.0])
    }

    fn zip_same(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor2D> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(shape_err(name, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor2D::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |p, q| p + q)?;
        self.push(out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |p, q| p - q)?;
        self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    /// Element-wise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |p, q| p * q)?;
        self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    fn row_broadcast(
        &self,
        a: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor2D> {
        let nodes = self.nodes.borrow();
        let (x, r) = (&nodes[a.0].value, &nodes[row.0].value);
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err(name, x, r));
        }
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (o, &rv) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o = f(*o, rv);
            }
        }
        Ok(out)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "add_row", |p, q| p + q)?;
        self.push(out, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }

    /// Multiplies every row of `a` element-wise by a `1 x c` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "mul_row", |p, q| p * q)?;
        self.push(out, Op::MulRow(a.0, row.0), &[a.0, row.0])
    }

    /// `scale * a + shift`.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(a).map(|v| scale * v + shift);
        self.push(out, Op::Affine(a.0, scale), &[a.0])
    }

    pub fn scale(&self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    pub fn row_softmax(&self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::RowSoftmax(a.0), &[a.0])
    }

    pub fn log_softmax_rows(&self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let lse = logsumexp(row.iter().copied());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a.0), &[a.0])
    }

    /// Per-row normalization to zero mean and unit variance, no affine part.
    pub fn layer_norm(&self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let c = out.cols() as f64;
        let mut inv_std = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a.0, inv_std }, &[a.0])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a.0), &[a.0])
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
            let cols = nodes[first.0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.cols() != cols {
                    return Err(shape_err("concat_rows", &nodes[first.0].value, v));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor2D::from_vec(rows, cols, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::ConcatRows(ids.clone()), &ids)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if start + len > x.rows() {
                return Err(TensorError::Shape {
                    op: "slice_rows",
                    lhs: x.shape(),
                    rhs: (start, len),
                });
            }
            Tensor2D::from_vec(
                len,
                x.cols(),
                x.data()[start * x.cols()..(start + len) * x.cols()].to_vec(),
            )?
        };
        self.push(out, Op::SliceRows { x: a.0, start }, &[a.0])
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
            let rows = nodes[first.0].value.rows();
            let mut cols = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.rows() != rows {
                    return Err(shape_err("concat_cols", &nodes[first.0].value, v));
                }
                cols += v.cols();
            }
            let mut out = Tensor2D::zeros(rows, cols);
            for i in 0..rows {
                let mut off = 0;
                for p in parts {
                    let v = &nodes[p.0].value;
                    out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
                    off += v.cols();
                }
            }
            out
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if start + len > x.cols() {
                return Err(TensorError::Shape {
                    op: "slice_cols",
                    lhs: x.shape(),
                    rhs: (start, len),
                });
            }
            Tensor2D::from_fn(x.rows(), len, |i, j| x.get(i, start + j))
        };
        self.push(out, Op::SliceCols { x: a.0, start }, &[a.0])
    }

    pub fn mean_over(&self, a: Var, axis: Axis) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if x.is_empty() {
                return Err(TensorError::Contract("mean over an empty tensor".into()));
            }
            match axis {
                Axis::Rows => Tensor2D::from_fn(1, x.cols(), |_, j| {
                    (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / x.rows() as f64
                }),
                Axis::Cols => Tensor2D::from_fn(x.rows(), 1, |i, _| {
                    x.row(i).iter().sum::<f64>() / x.cols() as f64
                }),
            }
        };
        self.push(out, Op::MeanOver { x: a.0, axis }, &[a.0])
    }

    /// Maximum along `axis`; ties go to the lowest index.
    pub fn max_over(&self, a: Var, axis: Axis) -> Result<Var> {
        let (out, argmax) = {
            let x = self.value(a);
            if x.is_empty() {
                return Err(TensorError::Contract("max over an empty tensor".into()));
            }
            let (n_out, n_red) = match axis {
                Axis::Rows => (x.cols(), x.rows()),
                Axis::Cols => (x.rows(), x.cols()),
            };
            let at = |o: usize, r: usize| match axis {
                Axis::Rows => x.get(r, o),
                Axis::Cols => x.get(o, r),
            };
            let mut vals = Vec::with_capacity(n_out);
            let mut argmax = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let mut best = 0;
                for r in 1..n_red {
                    if at(o, r) > at(o, best) {
                        best = r;
                    }
                }
                vals.push(at(o, best));
                argmax.push(best);
            }
            let out = match axis {
                Axis::Rows => Tensor2D::from_vec(1, n_out, vals)?,
                Axis::Cols => Tensor2D::from_vec(n_out, 1, vals)?,
            };
            (out, argmax)
        };
        self.push(out, Op::MaxOver { x: a.0, axis, argmax }, &[a.0])
    }

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor2D::filled(1, 1, s), Op::SumAll(a.0), &[a.0])
    }

    /// Divides each row by its L2 norm, with the norm clamped below at `eps`.
    pub fn normalize_rows(&self, a: Var, eps: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        let mut clamped = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (n, c) = if n < eps { (eps, true) } else { (n, false) };
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
            clamped.push(c);
        }
        self.push(out, Op::NormalizeRows { x: a.0, norms, clamped }, &[a.0])
    }

    /// Per-row `ln(sum(exp(x)))` over the entries where `mask` is set.
    /// Output is `r x 1`. Every row needs at least one masked entry.
    pub fn masked_row_logsumexp(&self, a: Var, mask: &[bool]) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if mask.len() != x.len() {
                return Err(TensorError::Shape {
                    op: "masked_row_logsumexp",
                    lhs: x.shape(),
                    rhs: (mask.len(), 1),
                });
            }
            let c = x.cols();
            let mut vals = Vec::with_capacity(x.rows());
            for i in 0..x.rows() {
                let m = &mask[i * c..(i + 1) * c];
                if !m.iter().any(|&b| b) {
                    return Err(TensorError::Contract(format!(
                        "row {i} has an empty mask in masked_row_logsumexp"
                    )));
                }
                let it = x.row(i).iter().zip(m).filter(|(_, &b)| b).map(|(&v, _)| v);
                vals.push(logsumexp(it));
            }
            Tensor2D::from_vec(x.rows(), 1, vals)?
        };
        self.push(
            out,
            Op::MaskedRowLse {
                x: a.0,
                mask: mask.to_vec(),
            },
            &[a.0],
        )
    }

    /// Picks individual `(row, col)` entries into an `n x 1` column.
    pub fn gather(&self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let out = {
            let x = self.value(a);
            let mut vals = Vec::with_capacity(idx.len());
            for &(r, c) in idx {
                if r >= x.rows() || c >= x.cols() {
                    return Err(TensorError::Shape {
                        op: "gather",
                        lhs: x.shape(),
                        rhs: (r, c),
                    });
                }
                vals.push(x.get(r, c));
            }
            Tensor2D::from_vec(idx.len(), 1, vals)?
        };
        self.push(
            out,
            Op::Gather {
                x: a.0,
                idx: idx.to_vec(),
            },
            &[a.0],
        )
    }

    /// Selects whole rows by index (embedding lookup when `a` is a table).
    pub fn gather_rows(&self, a: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let x = self.value(a);
            let mut data = Vec::with_capacity(ids.len() * x.cols());
            for &r in ids {
                if r >= x.rows() {
                    return Err(TensorError::Shape {
                        op: "gather_rows",
                        lhs: x.shape(),
                        rhs: (r, 0),
                    });
                }
                data.extend_from_slice(x.row(r));
            }
            Tensor2D::from_vec(ids.len(), x.cols(), data)?
        };
        self.push(
            out,
            Op::GatherRows {
                x: a.0,
                ids: ids.to_vec(),
            },
            &[a.0],
        )
    }

    /// Soft-DTW value of a `K x T` cost matrix: smoothed minimum over
    /// monotone paths from `(0, 0)` to `(K-1, T-1)` using the step set
    /// {down, right, diagonal}. Returns a `1 x 1` node.
    pub fn soft_dtw(&self, cost: Var, gamma: f64) -> Result<Var> {
        if !(gamma > 0.0) {
            return Err(TensorError::Contract(format!("soft-DTW gamma must be > 0, got {gamma}")));
        }
        let (value, r) = {
            let d = self.value(cost);
            if d.is_empty() {
                return Err(TensorError::Contract("soft-DTW of an empty matrix".into()));
            }
            let r = soft_dtw_table(&d, gamma);
            let w = d.cols() + 2;
            (r[d.rows() * w + d.cols()], r)
        };
        self.push(
            Tensor2D::filled(1, 1, value),
            Op::SoftDtw {
                cost: cost.0,
                gamma,
                r,
            },
            &[cost.0],
        )
    }

    /// Reverse pass from a scalar `root`. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.into_inner();
        let n = nodes.len();
        if root.0 >= n {
            return Err(TensorError::Contract("root is not on this tape".into()));
        }
        if nodes[root.0].value.shape() != (1, 1) {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar root, got {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2D>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor2D::filled(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            backprop_node(&nodes, i, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (node, g) in nodes.iter().zip(grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                match out.map.get_mut(&id) {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    None => {
                        out.map.insert(id, g);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Forward soft-DTW table with a one-cell border, `(K+2) x (T+2)`,
/// row-major. `r[i][j]` for `1 <= i <= K, 1 <= j <= T` holds the smoothed
/// cost of reaching cell `(i-1, j-1)`.
pub(crate) fn soft_dtw_table(d: &Tensor2D, gamma: f64) -> Vec<f64> {
    let (k, t) = d.shape();
    let w = t + 2;
    let mut r = vec![f64::INFINITY; (k + 2) * w];
    r[0] = 0.0;
    for i in 1..=k {
        for j in 1..=t {
            let prev = [r[(i - 1) * w + j - 1], r[(i - 1) * w + j], r[i * w + j - 1]];
            r[i * w + j] = d.get(i - 1, j - 1) + softmin(&prev, gamma);
        }
    }
    r
}

fn soft_dtw_grad(d: &Tensor2D, r: &[f64], gamma: f64) -> Tensor2D {
    let (k, t) = d.shape();
    let w = t + 2;
    let mut r = r.to_vec();
    // extended cost with zero border
    let dd = |i: usize, j: usize| {
        if (1..=k).contains(&i) && (1..=t).contains(&j) {
            d.get(i - 1, j - 1)
        } else {
            0.0
        }
    };
    for i in 1..=k {
        r[i * w + t + 1] = f64::NEG_INFINITY;
    }
    for j in 1..=t {
        r[(k + 1) * w + j] = f64::NEG_INFINITY;
    }
    r[(k + 1) * w + t + 1] = r[k * w + t];
    let mut e = vec![0.0; (k + 2) * w];
    e[(k + 1) * w + t + 1] = 1.0;
    let weight = |from: f64, to: f64, cost: f64| -> f64 {
        if to == f64::NEG_INFINITY {
            0.0
        } else {
            ((to - from - cost) / gamma).exp()
        }
    };
    for i in (1..=k).rev() {
        for j in (1..=t).rev() {
            let here = r[i * w + j];
            let a = weight(here, r[(i + 1) * w + j], dd(i + 1, j));
            let b = weight(here, r[i * w + j + 1], dd(i, j + 1));
            let c = weight(here, r[(i + 1) * w + j + 1], dd(i + 1, j + 1));
            e[i * w + j] = e[(i + 1) * w + j] * a + e[i * w + j + 1] * b + e[(i + 1) * w + j + 1] * c;
        }
    }
    Tensor2D::from_fn(k, t, |i, j| e[(i + 1) * w + j + 1])
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Affine(..) => "affine",
        Op::RowSoftmax(..) => "row_softmax",
        Op::LogSoftmaxRows(..) => "log_softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(..) => "gelu",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::MeanOver { .. } => "mean_over",
        Op::MaxOver { .. } => "max_over",
        Op::SumAll(..) => "sum_all",
        Op::NormalizeRows { .. } => "normalize_rows",
        Op::MaskedRowLse { .. } => "masked_row_logsumexp",
        Op::Gather { .. } => "gather",
        Op::GatherRows { .. } => "gather_rows",
        Op::SoftDtw { .. } => "soft_dtw",
    }
}

fn acc<'a>(grads: &'a mut [Option<Tensor2D>], nodes: &[Node], i: usize) -> Option<&'a mut Tensor2D> {
    if !nodes[i].needs_grad {
        return None;
    }
    let (r, c) = nodes[i].value.shape();
    Some(grads[i].get_or_insert_with(|| Tensor2D::zeros(r, c)))
}

fn add_into(grads: &mut [Option<Tensor2D>], nodes: &[Node], i: usize, g: &Tensor2D, scale: f64) {
    if let Some(t) = acc(grads, nodes, i) {
        for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
            *a += scale * b;
        }
    }
}

fn backprop_node(nodes: &[Node], i: usize, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) {
    let y = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(t) = acc(grads, nodes, a) {
                matmul_nt_acc(g.data(), bv.data(), t.data_mut(), m, n, k);
            }
            if let Some(t) = acc(grads, nodes, b) {
                matmul_tn_acc(av.data(), g.data(), t.data_mut(), m, k, n);
            }
        }
        &Op::MatMulNT(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            if let Some(t) = acc(grads, nodes, a) {
                matmul_acc(g.data(), bv.data(), t.data_mut(), m, n, k);
            }
            if let Some(t) = acc(grads, nodes, b) {
                matmul_tn_acc(g.data(), av.data(), t.data_mut(), m, n, k);
            }
        }
        &Op::Transpose(a) => add_into(grads, nodes, a, &g.transpose(), 1.0),
        &Op::Add(a, b) => {
            add_into(grads, nodes, a, g, 1.0);
            add_into(grads, nodes, b, g, 1.0);
        }
        &Op::Sub(a, b) => {
            add_into(grads, nodes, a, g, 1.0);
            add_into(grads, nodes, b, g, -1.0);
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(t) = acc(grads, nodes, a) {
                for ((o, gv), bv) in t.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *o += gv * bv;
                }
            }
            if let Some(t) = acc(grads, nodes, b) {
                for ((o, gv), av) in t.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gv * av;
                }
            }
        }
        &Op::AddRow(a, row) => {
            add_into(grads, nodes, a, g, 1.0);
            if let Some(t) = acc(grads, nodes, row) {
                for r in 0..g.rows() {
                    for (o, gv) in t.data_mut().iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
        }
        &Op::MulRow(a, row) => {
            let (av, rv) = (&nodes[a].value, &nodes[row].value);
            if let Some(t) = acc(grads, nodes, a) {
                for r in 0..g.rows() {
                    for ((o, gv), s) in t.row_mut(r).iter_mut().zip(g.row(r)).zip(rv.data()) {
                        *o += gv * s;
                    }
                }
            }
            if let Some(t) = acc(grads, nodes, row) {
                for r in 0..g.rows() {
                    for ((o, gv), x) in t.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                        *o += gv * x;
                    }
                }
            }
        }
        &Op::Affine(a, scale) => add_into(grads, nodes, a, g, scale),
        &Op::RowSoftmax(a) => {
            if let Some(t) = acc(grads, nodes, a) {
                for r in 0..g.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, yv), gv) in t.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
        }
        &Op::LogSoftmaxRows(a) => {
            if let Some(t) = acc(grads, nodes, a) {
                for r in 0..g.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    for ((o, yv), gv) in t.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += gv - yv.exp() * gsum;
                    }
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            if let Some(t) = acc(grads, nodes, *x) {
                let c = g.cols() as f64;
                for r in 0..g.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gmean = gr.iter().sum::<f64>() / c;
                    let gy = yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / c;
                    for ((o, yv), gv) in t.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += inv_std[r] * (gv - gmean - yv * gy);
                    }
                }
            }
        }
        &Op::Gelu(a) => {
            let av = &nodes[a].value;
            if let Some(t) = acc(grads, nodes, a) {
                for ((o, gv), x) in t.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gv * gelu_grad(*x);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let (r, c) = nodes[p].value.shape();
                if let Some(t) = acc(grads, nodes, p) {
                    for (o, gv) in t.data_mut().iter_mut().zip(&g.data()[off * c..(off + r) * c]) {
                        *o += gv;
                    }
                }
                off += r;
            }
        }
        &Op::SliceRows { x, start } => {
            if let Some(t) = acc(grads, nodes, x) {
                let c = g.cols();
                for (o, gv) in t.data_mut()[start * c..(start + g.rows()) * c]
                    .iter_mut()
                    .zip(g.data())
                {
                    *o += gv;
                }
            }
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let c = nodes[p].value.cols();
                if let Some(t) = acc(grads, nodes, p) {
                    for r in 0..g.rows() {
                        for (o, gv) in t.row_mut(r).iter_mut().zip(&g.row(r)[off..off + c]) {
                            *o += gv;
                        }
                    }
                }
                off += c;
            }
        }
        &Op::SliceCols { x, start } => {
            if let Some(t) = acc(grads, nodes, x) {
                for r in 0..g.rows() {
                    for (o, gv) in t.row_mut(r)[start..start + g.cols()].iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
        }
        &Op::MeanOver { x, axis } => {
            if let Some(t) = acc(grads, nodes, x) {
                let (rows, cols) = t.shape();
                for r in 0..rows {
                    for c in 0..cols {
                        let v = match axis {
                            Axis::Rows => g.get(0, c) / rows as f64,
                            Axis::Cols => g.get(r, 0) / cols as f64,
                        };
                        t.data_mut()[r * cols + c] += v;
                    }
                }
            }
        }
        Op::MaxOver { x, axis, argmax } => {
            if let Some(t) = acc(grads, nodes, *x) {
                for (o, &best) in argmax.iter().enumerate() {
                    match axis {
                        Axis::Rows => {
                            let cols = t.cols();
                            t.data_mut()[best * cols + o] += g.get(0, o);
                        }
                        Axis::Cols => {
                            let cols = t.cols();
                            t.data_mut()[o * cols + best] += g.get(o, 0);
                        }
                    }
                }
            }
        }
        &Op::SumAll(a) => {
            let s = g.data()[0];
            if let Some(t) = acc(grads, nodes, a) {
                for o in t.data_mut() {
                    *o += s;
                }
            }
        }
        Op::NormalizeRows { x, norms, clamped } => {
            if let Some(t) = acc(grads, nodes, *x) {
                for r in 0..g.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let n = norms[r];
                    if clamped[r] {
                        for (o, gv) in t.row_mut(r).iter_mut().zip(gr) {
                            *o += gv / n;
                        }
                    } else {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, yv), gv) in t.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += (gv - yv * dot) / n;
                        }
                    }
                }
            }
        }
        Op::MaskedRowLse { x, mask } => {
            let xv = &nodes[*x].value;
            if let Some(t) = acc(grads, nodes, *x) {
                let c = xv.cols();
                for r in 0..xv.rows() {
                    let (lse, gr) = (y.get(r, 0), g.get(r, 0));
                    for j in 0..c {
                        if mask[r * c + j] {
                            t.data_mut()[r * c + j] += gr * (xv.get(r, j) - lse).exp();
                        }
                    }
                }
            }
        }
        Op::Gather { x, idx } => {
            if let Some(t) = acc(grads, nodes, *x) {
                let c = t.cols();
                for (n, &(r, col)) in idx.iter().enumerate() {
                    t.data_mut()[r * c + col] += g.get(n, 0);
                }
            }
        }
        Op::GatherRows { x, ids } => {
            if let Some(t) = acc(grads, nodes, *x) {
                for (n, &r) in ids.iter().enumerate() {
                    for (o, gv) in t.row_mut(r).iter_mut().zip(g.row(n)) {
                        *o += gv;
                    }
                }
            }
        }
        Op::SoftDtw { cost, gamma, r } => {
            let d = &nodes[*cost].value;
            let e = soft_dtw_grad(d, r, *gamma);
            add_into(grads, nodes, *cost, &e, g.data()[0]);
        }
    }
}
