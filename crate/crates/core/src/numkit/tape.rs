//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Every operation appends one node; [`Tape::backward`] walks the nodes in
//! exact reverse order of insertion, so gradient accumulation order depends
//! only on the forward pass.

use std::fmt;
use std::rc::Rc;

use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use super::NumError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operation kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Tanh,
    Exp,
    Log,
    Neg,
}

impl ElementwiseKind {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Tanh => "tanh",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Neg => "neg",
        }
    }
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Constant,
    Unary(ElementwiseKind),
    Binary(ElementwiseKind),
    Scale(f64),
    AddScalar,
    MatMul,
    MatMulT,
    Sum,
    SumRows,
    Softmax { mask: Option<Rc<Vec<bool>>> },
    LogSoftmax { mask: Option<Rc<Vec<bool>>> },
    GatherRows { ids: Vec<usize> },
    Pick { cols: Vec<usize> },
    ConcatCols,
    Reshape,
    NormalizeRows { norms: Vec<f64> },
    Custom(Box<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Unary(k) | Op::Binary(k) => k.name(),
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul => "matmul",
            Op::MatMulT => "matmul_t",
            Op::Sum => "sum",
            Op::SumRows => "sum_rows",
            Op::Softmax { .. } => "softmax_rows",
            Op::LogSoftmax { .. } => "log_softmax_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
            Op::ConcatCols => "concat_cols",
            Op::Reshape => "reshape",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Custom(c) => c.name(),
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    needs_grad: bool,
}

/// Ordered record of a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros if it did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn checked(op: &'static str, t: Tensor) -> Result<Tensor, NumError> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(NumError::NonFinite { op })
    }
}

/// Broadcast geometry of a binary op in the 2-D view.
#[derive(Clone, Copy)]
struct Bcast {
    rows: usize,
    cols: usize,
    a: (usize, usize),
    b: (usize, usize),
}

impl Bcast {
    fn new(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Self, NumError> {
        let (ar, ac) = a.dims2();
        let (br, bc) = b.dims2();
        let dim = |x: usize, y: usize| -> Option<usize> {
            if x == y {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else if y == 1 {
                Some(x)
            } else {
                None
            }
        };
        match (dim(ar, br), dim(ac, bc)) {
            (Some(rows), Some(cols)) => Ok(Bcast { rows, cols, a: (ar, ac), b: (br, bc) }),
            _ => Err(NumError::shape_pair(op, a.shape(), b.shape())),
        }
    }

    fn out_shape(&self, a: &Tensor, b: &Tensor) -> Vec<usize> {
        if a.dims2() == (self.rows, self.cols) {
            a.shape().to_vec()
        } else if b.dims2() == (self.rows, self.cols) {
            b.shape().to_vec()
        } else {
            vec![self.rows, self.cols]
        }
    }

    #[inline]
    fn ia(&self, i: usize, j: usize) -> usize {
        let r = if self.a.0 == 1 { 0 } else { i };
        let c = if self.a.1 == 1 { 0 } else { j };
        r * self.a.1 + c
    }

    #[inline]
    fn ib(&self, i: usize, j: usize) -> usize {
        let r = if self.b.0 == 1 { 0 } else { i };
        let c = if self.b.1 == 1 { 0 } else { j };
        r * self.b.1 + c
    }
}

fn mask_for(rows: usize, cols: usize, mask: &Option<Rc<Vec<bool>>>, i: usize, j: usize) -> bool {
    debug_assert!(i < rows);
    mask.as_ref().is_none_or(|m| m[i * cols + j])
}

/// Row-wise softmax, optionally restricted to `mask`-valid entries (masked
/// entries get probability exactly 0).
pub fn softmax_rows_plain(a: &Tensor, mask: Option<&[bool]>) -> Result<Tensor, NumError> {
    let (m, n) = a.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = a.row(i);
        let valid = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
        let max = (0..n).filter(|&j| valid(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(NumError::Domain { op: "softmax_rows", detail: format!("row {i} has no valid entries") });
        }
        let mut z = 0.0;
        for j in (0..n).filter(|&j| valid(j)) {
            let e = (row[j] - max).exp();
            out[i * n + j] = e;
            z += e;
        }
        for j in (0..n).filter(|&j| valid(j)) {
            out[i * n + j] /= z;
        }
    }
    checked("softmax_rows", Tensor::from_parts_unchecked(a.shape().to_vec(), out))
}

fn log_softmax_plain(a: &Tensor, mask: Option<&[bool]>) -> Result<Tensor, NumError> {
    let (m, n) = a.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = a.row(i);
        let valid = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
        let max = (0..n).filter(|&j| valid(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(NumError::Domain { op: "log_softmax_rows", detail: format!("row {i} has no valid entries") });
        }
        // ln(1 + rest) with the arg-max term split off keeps precision when
        // one entry dominates
        let arg = (0..n).find(|&j| valid(j) && row[j] == max).expect("max is attained");
        let rest: f64 = (0..n).filter(|&j| j != arg && valid(j)).map(|j| (row[j] - max).exp()).sum();
        let log_z = rest.ln_1p();
        for j in (0..n).filter(|&j| valid(j)) {
            out[i * n + j] = (row[j] - max) - log_z;
        }
    }
    checked("log_softmax_rows", Tensor::from_parts_unchecked(a.shape().to_vec(), out))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in forward order.
    pub fn op_names(&self) -> Vec<String> {
        self.nodes.iter().map(|n| format!("{:?}", n.op)).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, inputs, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, vec![])
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, vec![])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var, NumError> {
        let name = kind.name();
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => self.unary(kind, a),
            _ => Err(NumError::Domain { op: name, detail: "wrong operand count".into() }),
        }
    }

    fn unary(&mut self, kind: ElementwiseKind, a: Var) -> Result<Var, NumError> {
        let x = self.value(a);
        if kind == ElementwiseKind::Log {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                return Err(NumError::Domain { op: "log", detail: format!("non-positive input {bad}") });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            ElementwiseKind::Tanh => f64::tanh,
            ElementwiseKind::Exp => f64::exp,
            ElementwiseKind::Log => f64::ln,
            ElementwiseKind::Neg => |v| -v,
            _ => unreachable!(),
        };
        let out = checked(kind.name(), x.map(f))?;
        Ok(self.push(out, Op::Unary(kind), vec![a]))
    }

    fn binary(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var, NumError> {
        let (x, y) = (self.value(a), self.value(b));
        let bc = Bcast::new(kind.name(), x, y)?;
        if kind == ElementwiseKind::Div && y.data().contains(&0.0) {
            return Err(NumError::Domain { op: "div", detail: "zero divisor".into() });
        }
        let f: fn(f64, f64) -> f64 = match kind {
            ElementwiseKind::Add => |p, q| p + q,
            ElementwiseKind::Sub => |p, q| p - q,
            ElementwiseKind::Mul => |p, q| p * q,
            ElementwiseKind::Div => |p, q| p / q,
            _ => unreachable!(),
        };
        let (xd, yd) = (x.data(), y.data());
        let mut out = Vec::with_capacity(bc.rows * bc.cols);
        for i in 0..bc.rows {
            for j in 0..bc.cols {
                out.push(f(xd[bc.ia(i, j)], yd[bc.ib(i, j)]));
            }
        }
        let t = checked(kind.name(), Tensor::from_parts_unchecked(bc.out_shape(x, y), out))?;
        Ok(self.push(t, Op::Binary(kind), vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(ElementwiseKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(ElementwiseKind::Div, a, b)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(ElementwiseKind::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(ElementwiseKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(ElementwiseKind::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(ElementwiseKind::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let out = checked("scale", self.value(a).map(|v| v * c))?;
        Ok(self.push(out, Op::Scale(c), vec![a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let out = checked("add_scalar", self.value(a).map(|v| v + c))?;
        Ok(self.push(out, Op::AddScalar, vec![a]))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (x, y) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (x.dims2(), y.dims2());
        if k != k2 {
            return Err(NumError::shape_pair("matmul", x.shape(), y.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), y.data(), &mut out, false);
        let t = checked("matmul", Tensor::from_parts_unchecked(vec![m, n], out))?;
        Ok(self.push(t, Op::MatMul, vec![a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (x, y) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (x.dims2(), y.dims2());
        if k != k2 {
            return Err(NumError::shape_pair("matmul_t", x.shape(), y.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, x.data(), y.data(), &mut out, false);
        let t = checked("matmul_t", Tensor::from_parts_unchecked(vec![m, n], out))?;
        Ok(self.push(t, Op::MatMulT, vec![a, b]))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let out = checked("sum", Tensor::scalar(self.value(a).sum()))?;
        Ok(self.push(out, Op::Sum, vec![a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(NumError::Domain { op: "mean", detail: "empty tensor".into() });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Row sums as an `m×1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let x = self.value(a);
        let (m, _) = x.dims2();
        let out: Vec<f64> = (0..m).map(|i| x.row(i).iter().sum()).collect();
        let t = checked("sum_rows", Tensor::from_parts_unchecked(vec![m, 1], out))?;
        Ok(self.push(t, Op::SumRows, vec![a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let out = softmax_rows_plain(self.value(a), None)?;
        Ok(self.push(out, Op::Softmax { mask: None }, vec![a]))
    }

    /// Softmax over the `true` entries of `mask` (row-major, same length as
    /// `a`); masked entries are exactly 0 and receive no gradient.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var, NumError> {
        self.check_mask("masked_softmax_rows", a, &mask)?;
        let out = softmax_rows_plain(self.value(a), Some(&mask))?;
        Ok(self.push(out, Op::Softmax { mask: Some(mask) }, vec![a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let out = log_softmax_plain(self.value(a), None)?;
        Ok(self.push(out, Op::LogSoftmax { mask: None }, vec![a]))
    }

    /// Log-softmax over valid entries; masked outputs are a 0 placeholder.
    pub fn masked_log_softmax_rows(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var, NumError> {
        self.check_mask("masked_log_softmax_rows", a, &mask)?;
        let out = log_softmax_plain(self.value(a), Some(&mask))?;
        Ok(self.push(out, Op::LogSoftmax { mask: Some(mask) }, vec![a]))
    }

    fn check_mask(&self, op: &'static str, a: Var, mask: &[bool]) -> Result<(), NumError> {
        if mask.len() != self.value(a).len() {
            return Err(NumError::Shape {
                op,
                detail: format!("mask length {} vs tensor {:?}", mask.len(), self.value(a).shape()),
            });
        }
        Ok(())
    }

    /// Rows of `table` selected by `ids`, in order.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let x = self.value(table);
        let (m, n) = x.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(NumError::Shape { op: "gather_rows", detail: format!("row {bad} out of {m}") });
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(x.row(i));
        }
        let t = Tensor::from_parts_unchecked(vec![ids.len(), n], out);
        Ok(self.push(t, Op::GatherRows { ids: ids.to_vec() }, vec![table]))
    }

    /// `out[i] = a[i, cols[i]]`, as an `m×1` column.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var, NumError> {
        let x = self.value(a);
        let (m, n) = x.dims2();
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(NumError::Shape {
                op: "pick",
                detail: format!("{} column indices for {:?}", cols.len(), x.shape()),
            });
        }
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &c)| x.get(i, c)).collect();
        let t = Tensor::from_parts_unchecked(vec![m, 1], out);
        Ok(self.push(t, Op::Pick { cols: cols.to_vec() }, vec![a]))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let m = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(NumError::Shape { op: "concat_cols", detail: "row counts differ".into() });
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::from_parts_unchecked(vec![m, total], out);
        Ok(self.push(t, Op::ConcatCols, parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumError> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape, vec![a]))
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let x = self.value(a);
        let (m, n) = x.dims2();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(NumError::Domain { op: "normalize_rows", detail: format!("row {i} is zero") });
            }
            norms.push(norm);
            out.extend(x.row(i).iter().map(|v| v / norm));
        }
        let t = Tensor::from_parts_unchecked(x.shape().to_vec(), out);
        Ok(self.push(t, Op::NormalizeRows { norms }, vec![a]))
    }

    /// Records an externally computed `value` whose gradient is given by `op`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var, NumError> {
        let value = checked(op.name(), value)?;
        Ok(self.push(value, Op::Custom(op), inputs.to_vec()))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumError> {
        let n_nodes = root.0 + 1;
        if self.value(root).len() != 1 {
            return Err(NumError::Shape {
                op: "backward",
                detail: format!("root must be a scalar, got {:?}", self.value(root).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..n_nodes).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for idx in (0..n_nodes).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let input_grads = self.node_backward(node, &g);
            grads[idx] = Some(g);
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[inp.0].needs_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(ig.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(ig),
                }
            }
        }
        let shapes = self.nodes[..n_nodes].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<Tensor> {
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let out = &node.value;
        let like = |t: &Tensor, data: Vec<f64>| Tensor::from_parts_unchecked(t.shape().to_vec(), data);
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Unary(kind) => {
                let x = inp(0);
                let d: Vec<f64> = match kind {
                    ElementwiseKind::Tanh => g.data().iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    ElementwiseKind::Exp => g.data().iter().zip(out.data()).map(|(g, y)| g * y).collect(),
                    ElementwiseKind::Log => g.data().iter().zip(x.data()).map(|(g, x)| g / x).collect(),
                    ElementwiseKind::Neg => g.data().iter().map(|g| -g).collect(),
                    _ => unreachable!(),
                };
                vec![like(x, d)]
            }
            Op::Binary(kind) => {
                let (x, y) = (inp(0), inp(1));
                let bc = Bcast::new("backward", x, y).expect("shapes validated in forward");
                let mut gx = vec![0.0; x.len()];
                let mut gy = vec![0.0; y.len()];
                let (xd, yd, gd) = (x.data(), y.data(), g.data());
                for i in 0..bc.rows {
                    for j in 0..bc.cols {
                        let (ia, ib) = (bc.ia(i, j), bc.ib(i, j));
                        let gv = gd[i * bc.cols + j];
                        let (da, db) = match kind {
                            ElementwiseKind::Add => (gv, gv),
                            ElementwiseKind::Sub => (gv, -gv),
                            ElementwiseKind::Mul => (gv * yd[ib], gv * xd[ia]),
                            ElementwiseKind::Div => (gv / yd[ib], -gv * xd[ia] / (yd[ib] * yd[ib])),
                            _ => unreachable!(),
                        };
                        gx[ia] += da;
                        gy[ib] += db;
                    }
                }
                vec![like(x, gx), like(y, gy)]
            }
            Op::Scale(c) => vec![g.map(|v| v * c)],
            Op::AddScalar | Op::Reshape => vec![like(inp(0), g.data().to_vec())],
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let ((m, k), (_, n)) = (a.dims2(), b.dims2());
                let mut ga = vec![0.0; m * k];
                gemm_nt(m, n, k, g.data(), b.data(), &mut ga, false);
                let mut gb = vec![0.0; k * n];
                gemm_tn(k, m, n, a.data(), g.data(), &mut gb, false);
                vec![like(a, ga), like(b, gb)]
            }
            Op::MatMulT => {
                let (a, b) = (inp(0), inp(1));
                let ((m, k), (n, _)) = (a.dims2(), b.dims2());
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), b.data(), &mut ga, false);
                let mut gb = vec![0.0; n * k];
                gemm_tn(n, m, k, g.data(), a.data(), &mut gb, false);
                vec![like(a, ga), like(b, gb)]
            }
            Op::Sum => {
                let gv = g.item();
                vec![inp(0).map(|_| gv)]
            }
            Op::SumRows => {
                let x = inp(0);
                let (m, n) = x.dims2();
                let d = (0..m).flat_map(|i| std::iter::repeat_n(g.data()[i], n)).collect();
                vec![like(x, d)]
            }
            Op::Softmax { mask } => {
                let (m, n) = out.dims2();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| g.get(i, j) * out.get(i, j)).sum();
                    for j in 0..n {
                        if mask_for(m, n, mask, i, j) {
                            d[i * n + j] = out.get(i, j) * (g.get(i, j) - dot);
                        }
                    }
                }
                vec![like(inp(0), d)]
            }
            Op::LogSoftmax { mask } => {
                let (m, n) = out.dims2();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let gsum: f64 = (0..n).filter(|&j| mask_for(m, n, mask, i, j)).map(|j| g.get(i, j)).sum();
                    for j in 0..n {
                        if mask_for(m, n, mask, i, j) {
                            d[i * n + j] = g.get(i, j) - out.get(i, j).exp() * gsum;
                        }
                    }
                }
                vec![like(inp(0), d)]
            }
            Op::GatherRows { ids } => {
                let x = inp(0);
                let n = x.cols();
                let mut d = vec![0.0; x.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..n {
                        d[i * n + j] += g.data()[r * n + j];
                    }
                }
                vec![like(x, d)]
            }
            Op::Pick { cols } => {
                let x = inp(0);
                let n = x.cols();
                let mut d = vec![0.0; x.len()];
                for (i, &c) in cols.iter().enumerate() {
                    d[i * n + c] += g.data()[i];
                }
                vec![like(x, d)]
            }
            Op::ConcatCols => {
                let total = out.cols();
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|v| {
                        let x = &self.nodes[v.0].value;
                        let (m, c) = x.dims2();
                        let mut d = Vec::with_capacity(m * c);
                        for i in 0..m {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                        }
                        offset += c;
                        like(x, d)
                    })
                    .collect()
            }
            Op::NormalizeRows { norms } => {
                let (m, n) = out.dims2();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| g.get(i, j) * out.get(i, j)).sum();
                    for j in 0..n {
                        d[i * n + j] = (g.get(i, j) - out.get(i, j) * dot) / norms[i];
                    }
                }
                vec![like(inp(0), d)]
            }
            Op::Custom(op) => {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                op.backward(&inputs, out, g)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[&[1.0, 2.0]]));
        let b = tape.constant(t(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn elementwise_constants() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0]).unwrap());
        let y = tape.elementwise(ElementwiseKind::Tanh, z, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
        let x = tape.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
        let e = tape.exp(x).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, std::f64::consts::E]);
    }

    #[test]
    fn domain_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.div(a, b), Err(NumError::Domain { op: "div", .. })));
        let c = tape.constant(Tensor::vector(vec![1.0, -1.0]).unwrap());
        assert!(matches!(tape.log(c), Err(NumError::Domain { op: "log", .. })));
        assert!(tape.elementwise(ElementwiseKind::Add, a, None).is_err());
    }

    #[test]
    fn broadcast_row_and_column() {
        let mut tape = Tape::new();
        let m = tape.leaf(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let row = tape.leaf(Tensor::vector(vec![10.0, 20.0]).unwrap());
        let col = tape.leaf(t(&[&[1.0], &[2.0]]));
        let a = tape.add(m, row).unwrap();
        assert_eq!(tape.value(a).data(), &[11.0, 22.0, 13.0, 24.0]);
        let b = tape.mul(a, col).unwrap();
        assert_eq!(tape.value(b).data(), &[11.0, 22.0, 26.0, 48.0]);
        let s = tape.sum(b).unwrap();
        let g = tape.backward(s).unwrap();
        // d/d row_j = sum_i col_i = 3
        assert_eq!(g.wrt(row).data(), &[3.0, 3.0]);
        assert_eq!(g.wrt(col).data(), &[33.0, 37.0]);
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(m, bad).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[1, 4]));
        let p = tape.softmax_rows(u).unwrap();
        assert_eq!(tape.value(p).data(), &[0.25; 4]);

        let lo = tape.constant(Tensor::from_rows(&[vec![1f64.ln(), 3f64.ln()]]).unwrap());
        let p = tape.softmax_rows(lo).unwrap();
        assert!((tape.value(p).get(0, 0) - 0.25).abs() < 1e-15);
        assert!((tape.value(p).get(0, 1) - 0.75).abs() < 1e-15);

        let big = tape.constant(Tensor::from_rows(&[vec![1e4, 1e4 + 1.0, 1e4 + 2.0]]).unwrap());
        let p = tape.softmax_rows(big).unwrap();
        assert!((tape.value(p).sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn masked_softmax_zeroes_invalid() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 5.0, 2.0]]).unwrap());
        let mask = Rc::new(vec![true, false, true]);
        let p = tape.masked_softmax_rows(a, mask.clone()).unwrap();
        assert_eq!(tape.value(p).get(0, 1), 0.0);
        assert!((tape.value(p).sum() - 1.0).abs() < 1e-12);
        let lp = tape.masked_log_softmax_rows(a, mask).unwrap();
        let picked = tape.pick(lp, &[2]).unwrap();
        let s = tape.sum(picked).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).get(0, 1), 0.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let p = tape.mul(a, c).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.wrt(a).item(), 5.0);
        assert!(g.get(c).is_none());
    }
}
