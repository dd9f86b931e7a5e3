//! Tape of eagerly evaluated operations with a reverse sweep.
//!
//! Every operator computes its value when it is recorded, so the tape is
//! always topologically ordered: a node's operands have smaller ids. The
//! reverse sweep walks the tape backwards from the root and accumulates
//! gradients into every node that depends on a trainable leaf.

use std::any::Any;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{DiffError, Result};
use crate::kernels::{self, gemm, Trans};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined operator with a hand-written vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns the output value and optional state kept for the backward pass.
    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Option<Box<dyn Any + Send + Sync>>)>;

    /// Gradients for each input given the gradient of the output. `None`
    /// means the input receives no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        saved: Option<&(dyn Any + Send + Sync)>,
        grad_out: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Constant,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: Trans,
        tb: Trans,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    ClampMin(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LogSumExp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    MaxRows {
        a: NodeId,
        argmax: Vec<usize>,
    },
    L2Normalize(NodeId),
    StopGradient,
    Transpose(NodeId),
    ExpandRows(NodeId),
    ExpandCols(NodeId),
    SliceCols {
        a: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceRows {
        a: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    EmbeddingBag {
        table: NodeId,
        bags: Vec<Vec<usize>>,
    },
    Pick {
        a: NodeId,
        idx: Vec<usize>,
    },
    Custom {
        op: Arc<dyn CustomOp>,
        inputs: Vec<NodeId>,
        saved: Option<Box<dyn Any + Send + Sync>>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LogSumExp(..) => "log_sum_exp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::MaxRows { .. } => "max_rows",
            Op::L2Normalize(..) => "l2_normalize",
            Op::StopGradient => "stop_gradient",
            Op::Transpose(..) => "transpose",
            Op::ExpandRows(..) => "expand_rows",
            Op::ExpandCols(..) => "expand_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::EmbeddingBag { .. } => "embedding_bag",
            Op::Pick { .. } => "pick",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Rows,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: BTreeMap<String, NodeId>,
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: BTreeMap<String, NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|&id| self.get(id))
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// Shape of a per-row reduction of `shape`.
fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    match shape.len() {
        0 | 1 => Vec::new(),
        _ => vec![shape[0]],
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op.tag() });
        }
        self.push_unchecked(op, Arc::new(value), requires_grad)
    }

    fn push_unchecked(
        &mut self,
        op: Op,
        value: Arc<Tensor>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Argmax indices recorded by [`Graph::max_rows`].
    pub fn argmax_of(&self, id: NodeId) -> Option<&[usize]> {
        match &self.nodes[id.0].op {
            Op::MaxRows { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn id_of(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Trainable named input. Rebinding a name shadows the previous node.
    pub fn leaf(&mut self, name: &str, value: Arc<Tensor>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: "leaf" });
        }
        let id = self.push_unchecked(Op::Leaf, value, true)?;
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(v))
    }

    fn mat_dims(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(shape_err(op, &[s]));
        }
        Ok((s[0], s[1]))
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, ta: Trans, tb: Trans) -> Result<NodeId> {
        let (ar, ac) = self.mat_dims("matmul", a)?;
        let (br, bc) = self.mat_dims("matmul", b)?;
        let (m, k) = if ta == Trans::No { (ar, ac) } else { (ac, ar) };
        let (k2, n) = if tb == Trans::No { (br, bc) } else { (bc, br) };
        if k != k2 {
            return Err(shape_err("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            self.value(a).data(),
            (ar, ac),
            ta,
            self.value(b).data(),
            (br, bc),
            tb,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Op::MatMul { a, b, ta, tb },
            Tensor::new(vec![m, n], out)?,
            rg,
        )
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, Trans::No, Trans::No)
    }

    /// Matrix product `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, Trans::No, Trans::Yes)
    }

    fn bcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            Ok(Bcast::Rows)
        } else {
            Err(shape_err(op, &[sa, sb]))
        }
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: fn(f64, f64) -> f64,
        mk: fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let tag = mk(a, b).tag();
        let kind = self.bcast(tag, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let out: Vec<f64> = match kind {
            Bcast::Same => va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Bcast::Rows => {
                let n = vb.len();
                va.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, vb.data()[i % n]))
                    .collect()
            }
        };
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(mk(a, b), t, rg)
    }

    /// Elementwise sum; `b` may be a row vector broadcast over the leading extent.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(op, t, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.unary(a, Op::MulScalar(a, s), |x| x * s)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Recip(a), f64::recip)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `max(a, lo)`; gradient is blocked where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> Result<NodeId> {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let mut t = self.value(a).clone();
        for r in 0..t.rows() {
            kernels::softmax_in_place(t.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(Op::Softmax(a), t, rg)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let mut t = self.value(a).clone();
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let lse = kernels::log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(Op::LogSoftmax(a), t, rg)
    }

    /// Per-row log-sum-exp; a vector reduces to a scalar.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let out: Vec<f64> = (0..v.rows())
            .map(|r| kernels::log_sum_exp(v.row(r)))
            .collect();
        let t = Tensor::new(reduced_shape(v.shape()), out)?;
        let rg = self.rg(a);
        self.push(Op::LogSumExp(a), t, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(DiffError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let m = v.sum() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Op::Mean(a), Tensor::scalar(m), rg)
    }

    /// Sum over the last axis: `[m, n] -> [m]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let out: Vec<f64> = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let t = Tensor::new(reduced_shape(v.shape()), out)?;
        let rg = self.rg(a);
        self.push(Op::SumRows(a), t, rg)
    }

    /// Sum over the leading axis: `[m, n] -> [n]`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.mat_dims("sum_cols", a)?;
        let v = self.value(a);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(Op::SumCols(a), Tensor::vector(out), rg)
    }

    /// Per-row maximum; the argmax (lowest index on ties) is kept on the node.
    pub fn max_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let argmax: Vec<usize> = (0..v.rows()).map(|r| kernels::argmax(v.row(r))).collect();
        let out: Vec<f64> = argmax
            .iter()
            .enumerate()
            .map(|(r, &j)| v.row(r)[j])
            .collect();
        let t = Tensor::new(reduced_shape(v.shape()), out)?;
        let rg = self.rg(a);
        self.push(Op::MaxRows { a, argmax }, t, rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let mut t = self.value(a).clone();
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let norm = kernels::dot(row, row).sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let rg = self.rg(a);
        self.push(Op::L2Normalize(a), t, rg)
    }

    /// Passes the value through and blocks derivative flow.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Arc::clone(&self.nodes[a.0].value);
        self.push_unchecked(Op::StopGradient, v, false)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.mat_dims("transpose", a)?;
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v.data()[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose(a), Tensor::new(vec![n, m], out)?, rg)
    }

    /// Repeats a vector `[n]` as `m` rows.
    pub fn expand_rows(&mut self, a: NodeId, m: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() != 1 {
            return Err(shape_err("expand_rows", &[v.shape()]));
        }
        let n = v.len();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(v.data());
        }
        let rg = self.rg(a);
        self.push(Op::ExpandRows(a), Tensor::new(vec![m, n], out)?, rg)
    }

    /// Repeats a vector `[m]` as `n` columns.
    pub fn expand_cols(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() != 1 {
            return Err(shape_err("expand_cols", &[v.shape()]));
        }
        let m = v.len();
        let mut out = Vec::with_capacity(m * n);
        for &x in v.data() {
            out.extend(std::iter::repeat(x).take(n));
        }
        let rg = self.rg(a);
        self.push(Op::ExpandCols(a), Tensor::new(vec![m, n], out)?, rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.mat_dims("slice_cols", a)?;
        if start > end || end > n {
            return Err(DiffError::InvalidArgument {
                op: "slice_cols",
                msg: format!("range {start}..{end} outside {n} columns"),
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&v.row(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push(
            Op::SliceCols { a, start },
            Tensor::new(vec![m, end - start], out)?,
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(DiffError::InvalidArgument {
                op: "concat_cols",
                msg: "no operands".into(),
            });
        }
        let mut m = None;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.mat_dims("concat_cols", p)?;
            if *m.get_or_insert(pm) != pm {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                return Err(shape_err("concat_cols", &shapes));
            }
            n += pn;
        }
        let m = m.unwrap_or(0);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(vec![m, n], out)?,
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.mat_dims("slice_rows", a)?;
        if start > end || end > m {
            return Err(DiffError::InvalidArgument {
                op: "slice_rows",
                msg: format!("range {start}..{end} outside {m} rows"),
            });
        }
        let out = self.value(a).data()[start * n..end * n].to_vec();
        let rg = self.rg(a);
        self.push(
            Op::SliceRows { a, start },
            Tensor::new(vec![end - start, n], out)?,
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(DiffError::InvalidArgument {
                op: "concat_rows",
                msg: "no operands".into(),
            });
        }
        let mut n = None;
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.mat_dims("concat_rows", p)?;
            if *n.get_or_insert(pn) != pn {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                return Err(shape_err("concat_rows", &shapes));
            }
            m += pm;
        }
        let n = n.unwrap_or(0);
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::new(vec![m, n], out)?,
            rg,
        )
    }

    fn check_indices(
        &self,
        op: &'static str,
        idx: impl Iterator<Item = usize>,
        bound: usize,
    ) -> Result<()> {
        for i in idx {
            if i >= bound {
                return Err(DiffError::InvalidArgument {
                    op,
                    msg: format!("index {i} out of range {bound}"),
                });
            }
        }
        Ok(())
    }

    /// Rows of `table` selected by `idx`.
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (v, d) = self.mat_dims("gather_rows", table)?;
        self.check_indices("gather_rows", idx.iter().copied(), v)?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(table);
        self.push(
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            Tensor::new(vec![idx.len(), d], out)?,
            rg,
        )
    }

    /// Mean of the selected rows of `table` per bag: `[bags, d]`.
    pub fn embedding_bag_mean(&mut self, table: NodeId, bags: &[Vec<usize>]) -> Result<NodeId> {
        let (v, d) = self.mat_dims("embedding_bag", table)?;
        self.check_indices("embedding_bag", bags.iter().flatten().copied(), v)?;
        if bags.iter().any(Vec::is_empty) {
            return Err(DiffError::InvalidArgument {
                op: "embedding_bag",
                msg: "empty bag".into(),
            });
        }
        let tv = self.value(table);
        let mut out = vec![0.0; bags.len() * d];
        for (b, bag) in bags.iter().enumerate() {
            let dst = &mut out[b * d..(b + 1) * d];
            for &t in bag {
                for (o, x) in dst.iter_mut().zip(tv.row(t)) {
                    *o += x;
                }
            }
            let inv = 1.0 / bag.len() as f64;
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(table);
        self.push(
            Op::EmbeddingBag {
                table,
                bags: bags.to_vec(),
            },
            Tensor::new(vec![bags.len(), d], out)?,
            rg,
        )
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.mat_dims("pick", a)?;
        if idx.len() != m {
            return Err(DiffError::InvalidArgument {
                op: "pick",
                msg: format!("{} indices for {m} rows", idx.len()),
            });
        }
        self.check_indices("pick", idx.iter().copied(), n)?;
        let v = self.value(a);
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &j)| v.get2(r, j)).collect();
        let rg = self.rg(a);
        self.push(
            Op::Pick {
                a,
                idx: idx.to_vec(),
            },
            Tensor::vector(out),
            rg,
        )
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let (out, saved) = op.forward(&vals)?;
        if !out.is_finite() {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push_unchecked(
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
                saved,
            },
            Arc::new(out),
            rg,
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            names: self.names.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient slot for `id`, created zeroed on first use.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], id: NodeId) -> &'g mut Tensor {
        grads[id.0].get_or_insert_with(|| Tensor::zeros(self.shape(id)))
    }

    fn reduce_bcast(&self, g: &Tensor, target: NodeId) -> Tensor {
        let ts = self.shape(target);
        if g.shape() == ts {
            return g.clone();
        }
        let n = ts[0];
        let mut out = vec![0.0; n];
        for r in 0..g.rows() {
            for (o, x) in out.iter_mut().zip(g.row(r)) {
                *o += x;
            }
        }
        Tensor::vector(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::MatMul { a, b, ta, tb } => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let va = self.value(*a);
                let vb = self.value(*b);
                let (ad, bd) = (
                    (va.shape()[0], va.shape()[1]),
                    (vb.shape()[0], vb.shape()[1]),
                );
                let flip = |t: Trans| {
                    if t == Trans::No {
                        Trans::Yes
                    } else {
                        Trans::No
                    }
                };
                if self.rg(*a) {
                    let dst = self.slot(grads, *a);
                    match ta {
                        Trans::No => gemm(
                            1.0,
                            g.data(),
                            (m, n),
                            Trans::No,
                            vb.data(),
                            bd,
                            flip(*tb),
                            1.0,
                            dst.data_mut(),
                        ),
                        Trans::Yes => gemm(
                            1.0,
                            vb.data(),
                            bd,
                            *tb,
                            g.data(),
                            (m, n),
                            Trans::Yes,
                            1.0,
                            dst.data_mut(),
                        ),
                    }
                }
                if self.rg(*b) {
                    let dst = self.slot(grads, *b);
                    match tb {
                        Trans::No => gemm(
                            1.0,
                            va.data(),
                            ad,
                            flip(*ta),
                            g.data(),
                            (m, n),
                            Trans::No,
                            1.0,
                            dst.data_mut(),
                        ),
                        Trans::Yes => gemm(
                            1.0,
                            g.data(),
                            (m, n),
                            Trans::Yes,
                            va.data(),
                            ad,
                            *ta,
                            1.0,
                            dst.data_mut(),
                        ),
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let gb = self.reduce_bcast(g, *b);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let gb = self.reduce_bcast(&g.map(|v| -v), *b);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let nb = vb.len();
                if self.rg(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gv)| gv * vb.data()[k % nb])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), data)?);
                }
                if self.rg(*b) {
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &x)| gv * x)
                        .collect();
                    let full = Tensor::new(va.shape().to_vec(), data)?;
                    let gb = self.reduce_bcast(&full, *b);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Exp(a) => self.elementwise(grads, *a, g, |_, y, gv| gv * y, y),
            Op::Log(a) => self.elementwise(grads, *a, g, |x, _, gv| gv / x, y),
            Op::Square(a) => self.elementwise(grads, *a, g, |x, _, gv| 2.0 * x * gv, y),
            Op::Sqrt(a) => self.elementwise(grads, *a, g, |_, y, gv| gv / (2.0 * y), y),
            Op::Recip(a) => self.elementwise(grads, *a, g, |_, y, gv| -gv * y * y, y),
            Op::Tanh(a) => self.elementwise(grads, *a, g, |_, y, gv| gv * (1.0 - y * y), y),
            Op::Relu(a) => {
                self.elementwise(grads, *a, g, |x, _, gv| if x > 0.0 { gv } else { 0.0 }, y)
            }
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                let va = self.value(*a);
                let data = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x >= lo { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), data)?);
            }
            Op::Softmax(a) => {
                let mut out = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = kernels::dot(yr, gr);
                    for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::LogSoftmax(a) => {
                let mut out = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: f64 = gr.iter().sum();
                    for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * s;
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::LogSumExp(a) => {
                let va = self.value(*a);
                let mut out = Tensor::zeros(va.shape());
                for r in 0..va.rows() {
                    let (lse, gv) = (y.data()[r], g.data()[r]);
                    for (o, &x) in out.row_mut(r).iter_mut().zip(va.row(r)) {
                        *o = gv * (x - lse).exp();
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.data()[0] / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::SumRows(a) => {
                let va = self.value(*a);
                let mut out = Tensor::zeros(va.shape());
                for r in 0..va.rows() {
                    let gv = g.data()[r];
                    out.row_mut(r).iter_mut().for_each(|o| *o = gv);
                }
                self.accumulate(grads, *a, out);
            }
            Op::SumCols(a) => {
                let va = self.value(*a);
                let mut out = Tensor::zeros(va.shape());
                for r in 0..va.rows() {
                    out.row_mut(r).copy_from_slice(g.data());
                }
                self.accumulate(grads, *a, out);
            }
            Op::MaxRows { a, argmax } => {
                if self.rg(*a) {
                    let dst = self.slot(grads, *a);
                    let n = dst.cols();
                    for (r, &j) in argmax.iter().enumerate() {
                        dst.data_mut()[r * n + j] += g.data()[r];
                    }
                }
            }
            Op::L2Normalize(a) => {
                let va = self.value(*a);
                let mut out = Tensor::zeros(va.shape());
                for r in 0..va.rows() {
                    let x = va.row(r);
                    let norm = kernels::dot(x, x).sqrt().max(1e-12);
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = kernels::dot(yr, gr);
                    for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * s) / norm;
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Transpose(a) => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        out[c * m + r] = g.data()[r * n + c];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, m], out)?);
            }
            Op::ExpandRows(a) => {
                let gb = self.reduce_bcast(g, *a);
                self.accumulate(grads, *a, gb);
            }
            Op::ExpandCols(a) => {
                let out: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                self.accumulate(grads, *a, Tensor::vector(out));
            }
            Op::SliceCols { a, start } => {
                if self.rg(*a) {
                    let w = g.cols();
                    let dst = self.slot(grads, *a);
                    for r in 0..g.rows() {
                        for (o, x) in dst.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.rg(p) {
                        let dst = self.slot(grads, p);
                        for r in 0..g.rows() {
                            for (o, x) in dst.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += x;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { a, start } => {
                if self.rg(*a) {
                    let n = g.cols();
                    let dst = self.slot(grads, *a);
                    for (o, x) in dst.data_mut()[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *o += x;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        let dst = self.slot(grads, p);
                        for (o, x) in dst.data_mut().iter_mut().zip(&g.data()[off..off + len]) {
                            *o += x;
                        }
                    }
                    off += len;
                }
            }
            Op::GatherRows { table, idx } => {
                if self.rg(*table) {
                    let dst = self.slot(grads, *table);
                    for (r, &t) in idx.iter().enumerate() {
                        for (o, x) in dst.row_mut(t).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::EmbeddingBag { table, bags } => {
                if self.rg(*table) {
                    let dst = self.slot(grads, *table);
                    for (b, bag) in bags.iter().enumerate() {
                        let inv = 1.0 / bag.len() as f64;
                        for &t in bag {
                            for (o, x) in dst.row_mut(t).iter_mut().zip(g.row(b)) {
                                *o += x * inv;
                            }
                        }
                    }
                }
            }
            Op::Pick { a, idx } => {
                if self.rg(*a) {
                    let dst = self.slot(grads, *a);
                    let n = dst.cols();
                    for (r, &j) in idx.iter().enumerate() {
                        dst.data_mut()[r * n + j] += g.data()[r];
                    }
                }
            }
            Op::Custom { op, inputs, saved } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let outs = op.backward(&vals, y, saved.as_deref(), g)?;
                if outs.len() != inputs.len() {
                    return Err(DiffError::InvalidArgument {
                        op: op.name(),
                        msg: format!(
                            "backward returned {} gradients for {} inputs",
                            outs.len(),
                            inputs.len()
                        ),
                    });
                }
                for (&inp, out) in inputs.iter().zip(outs) {
                    if let Some(t) = out {
                        if t.shape() != self.shape(inp) {
                            return Err(shape_err(op.name(), &[t.shape(), self.shape(inp)]));
                        }
                        self.accumulate(grads, inp, t);
                    }
                }
            }
        }
        Ok(())
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Tensor>],
        a: NodeId,
        g: &Tensor,
        f: impl Fn(f64, f64, f64) -> f64,
        y: &Tensor,
    ) {
        if !self.rg(a) {
            return;
        }
        let x = self.value(a);
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(y.data())
            .zip(g.data())
            .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("elementwise gradient shape");
        self.accumulate(grads, a, t);
    }
}
