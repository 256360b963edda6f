//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as it executes. [`Tape::backward`]
//! walks the record in exact reverse order and each primitive adds its
//! contribution to the gradients of its inputs. Handles ([`Var`]) are plain
//! indices into the record, so graphs are built with ordinary method calls:
//!
//! ```
//! use diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::row(&[0.0]));
//! let y = tape.sigmoid(x).unwrap();
//! let s = tape.sum(y).unwrap();
//! tape.backward(s).unwrap();
//! assert_eq!(tape.value(y).item(), 0.5);
//! assert_eq!(tape.grad(x).unwrap().item(), 0.25);
//! ```

use std::collections::HashMap;

use crate::error::{invalid, DiffError, Result};
use crate::params::ParameterStore;
use crate::tensor::{gemm, Tensor};

/// Lower/upper clamp applied to predictions inside the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    PRelu(Var, Var),
    Sigmoid(Var),
    Sqrt(Var),
    Log(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    AssembleRows(Vec<(Var, Vec<usize>)>),
    Reshape(Var),
    MeanRows(Var, Option<Vec<f64>>),
    VarRows(Var, Option<Vec<f64>>),
    Sum(Var),
    MaskedSoftmax(Var, Vec<bool>),
    SegmentWeightedSum(Var, Var),
    Grl(Var, f64),
    Pearson(Var, Var, f64),
    Bce {
        pred: Var,
        targets: Vec<f64>,
        weights: Option<Vec<f64>>,
        reduction: Reduction,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

#[inline]
fn bidx(t: (usize, usize), r: usize, c: usize) -> usize {
    let rr = if t.0 == 1 { 0 } else { r };
    let cc = if t.1 == 1 { 0 } else { c };
    rr * t.1 + cc
}

fn grad_slot(slot: &mut Option<Tensor>, shape: (usize, usize)) -> &mut Tensor {
    slot.get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
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

    /// Gradient accumulated by the last [`Tape::backward`]; `None` when no
    /// gradient reached this value.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Gradient of a named parameter used on this tape.
    pub fn param_grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.grad(*v))
    }

    /// `(name, gradient)` for every parameter that received a gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(name), Some(g)) => Some((name.as_str(), g)),
            _ => None,
        })
    }

    fn push(&mut self, op: &'static str, value: Tensor, requires_grad: bool, node_op: Op) -> Result<Var> {
        if let Some((index, v)) = value.first_non_finite() {
            return Err(DiffError::NonFinite { op, index, value: v });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: node_op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives a gradient slot but never requires one.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that should receive a gradient without being a stored parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Sign of every input entry of a relu or prelu, in execution order. Two
    /// runs of one graph with equal patterns lie on the same linear piece of
    /// every such unit.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) | Op::PRelu(a, _) = &n.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    /// Reads a named parameter onto the tape. Repeated reads share one node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?
            .clone();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Param(name.to_string()),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, rg, Op::MatMul(a, b))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        let (rows, cols) = match (broadcast_dim(sa.0, sb.0), broadcast_dim(sa.1, sb.1)) {
            (Some(r), Some(c)) => (r, c),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: kind.name(),
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = da[bidx(sa, r, c)];
                let y = db[bidx(sb, r, c)];
                out.push(match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(kind.name(), Tensor::new(rows, cols, out)?, rg, Op::Binary(kind, a, b))
    }

    /// Elementwise sum; either side may broadcast along a unit dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push("scale", out, rg, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push("add_scalar", out, rg, Op::AddScalar(a))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push("relu", out, rg, Op::Relu(a))
    }

    /// Parametric relu with a learnable negative-side slope per column
    /// (`(1, cols)`) or shared (`(1, 1)`).
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        let ss = self.value(slope).shape();
        if ss.0 != 1 || !(ss.1 == 1 || ss.1 == sa.1) {
            return Err(DiffError::ShapeMismatch {
                op: "prelu",
                lhs: sa,
                rhs: ss,
            });
        }
        let x = self.value(a).data();
        let s = self.value(slope).data();
        let mut out = Vec::with_capacity(x.len());
        for r in 0..sa.0 {
            for c in 0..sa.1 {
                let v = x[r * sa.1 + c];
                out.push(if v > 0.0 { v } else { s[if ss.1 == 1 { 0 } else { c }] * v });
            }
        }
        let rg = self.rg(a) || self.rg(slope);
        self.push("prelu", Tensor::new(sa.0, sa.1, out)?, rg, Op::PRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push("sigmoid", out, rg, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push("sqrt", out, rg, Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push("log", out, rg, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push("square", out, rg, Op::Square(a))
    }

    /// Column-wise concatenation; all parts share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.0 != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: (rows, cols),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push("concat", Tensor::new(rows, cols, out)?, rg, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise (batch axis) concatenation.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_rows", "no inputs"));
        }
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: t.shape(),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push("concat_rows", Tensor::new(rows, cols, out)?, rg, Op::ConcatRows(parts.to_vec()))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= t.rows() {
                return Err(invalid("gather_rows", format!("row {r} out of range for {} rows", t.rows())));
            }
            out.extend_from_slice(t.row_slice(r));
        }
        let rg = self.rg(a);
        self.push(
            "gather_rows",
            Tensor::new(rows.len(), cols, out)?,
            rg,
            Op::GatherRows(a, rows.to_vec()),
        )
    }

    /// Embedding lookup: row `ids[k]` of `table` becomes output row `k`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Inverse of splitting a batch: part `k` supplies output rows
    /// `positions[k]`. Every output row must be covered exactly once.
    pub fn assemble_rows(&mut self, parts: &[(Var, Vec<usize>)], total_rows: usize) -> Result<Var> {
        let cols = parts
            .first()
            .map(|(v, _)| self.value(*v).cols())
            .ok_or_else(|| invalid("assemble_rows", "no inputs"))?;
        let mut out = vec![0.0; total_rows * cols];
        let mut seen = vec![false; total_rows];
        for (v, positions) in parts {
            let t = self.value(*v);
            if t.cols() != cols || t.rows() != positions.len() {
                return Err(DiffError::ShapeMismatch {
                    op: "assemble_rows",
                    lhs: (positions.len(), cols),
                    rhs: t.shape(),
                });
            }
            for (k, &p) in positions.iter().enumerate() {
                if p >= total_rows || seen[p] {
                    return Err(invalid("assemble_rows", format!("row {p} out of range or duplicated")));
                }
                seen[p] = true;
                out[p * cols..(p + 1) * cols].copy_from_slice(t.row_slice(k));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(invalid("assemble_rows", "output rows left uncovered"));
        }
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        self.push(
            "assemble_rows",
            Tensor::new(total_rows, cols, out)?,
            rg,
            Op::AssembleRows(parts.to_vec()),
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if t.len() != rows * cols {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape(),
                rhs: (rows, cols),
            });
        }
        let out = Tensor::new(rows, cols, t.data().to_vec())?;
        let rg = self.rg(a);
        self.push("reshape", out, rg, Op::Reshape(a))
    }

    fn check_mask(&self, op: &'static str, a: Var, mask: Option<&[f64]>) -> Result<f64> {
        let rows = self.value(a).rows();
        match mask {
            None => {
                if rows == 0 {
                    return Err(invalid(op, "empty batch"));
                }
                Ok(rows as f64)
            }
            Some(m) => {
                if m.len() != rows {
                    return Err(DiffError::ShapeMismatch {
                        op,
                        lhs: (rows, 1),
                        rhs: (m.len(), 1),
                    });
                }
                let n: f64 = m.iter().sum();
                if n <= 0.0 {
                    return Err(invalid(op, "mask selects no rows"));
                }
                Ok(n)
            }
        }
    }

    /// Mean over the batch axis, optionally restricted to rows with a
    /// non-zero mask weight. Output shape `(1, cols)`.
    pub fn mean_rows(&mut self, a: Var, mask: Option<&[f64]>) -> Result<Var> {
        let n = self.check_mask("mean_rows", a, mask)?;
        let out = masked_mean(self.value(a), mask, n);
        let rg = self.rg(a);
        self.push("mean_rows", out, rg, Op::MeanRows(a, mask.map(<[f64]>::to_vec)))
    }

    /// Biased variance over the batch axis, optionally masked.
    pub fn var_rows(&mut self, a: Var, mask: Option<&[f64]>) -> Result<Var> {
        let n = self.check_mask("var_rows", a, mask)?;
        let t = self.value(a);
        let mean = masked_mean(t, mask, n);
        let cols = t.cols();
        let mut out = vec![0.0; cols];
        for r in 0..t.rows() {
            let w = mask.map_or(1.0, |m| m[r]);
            if w == 0.0 {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                let d = t.get(r, c) - mean.data()[c];
                *o += w * d * d;
            }
        }
        out.iter_mut().for_each(|x| *x /= n);
        let rg = self.rg(a);
        self.push("var_rows", Tensor::new(1, cols, out)?, rg, Op::VarRows(a, mask.map(<[f64]>::to_vec)))
    }

    /// Sum of all entries, `(1, 1)`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), rg, Op::Sum(a))
    }

    /// Row-wise softmax restricted to `valid` positions. Invalid positions
    /// output zero; a row with no valid position is all zeros.
    pub fn masked_softmax(&mut self, scores: Var, valid: &[bool]) -> Result<Var> {
        let t = self.value(scores);
        if valid.len() != t.len() {
            return Err(DiffError::ShapeMismatch {
                op: "masked_softmax",
                lhs: t.shape(),
                rhs: (valid.len(), 1),
            });
        }
        let (rows, cols) = t.shape();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = t.row_slice(r);
            let ok = &valid[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(ok)
                .filter(|(_, v)| **v)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for c in 0..cols {
                if ok[c] {
                    let e = (row[c] - max).exp();
                    out[r * cols + c] = e;
                    z += e;
                }
            }
            for c in 0..cols {
                out[r * cols + c] /= z;
            }
        }
        let rg = self.rg(scores);
        self.push(
            "masked_softmax",
            Tensor::new(rows, cols, out)?,
            rg,
            Op::MaskedSoftmax(scores, valid.to_vec()),
        )
    }

    /// `out[b] = Σ_l weights[b, l] · values[b·L + l]` for `weights` of shape
    /// `(B, L)` and `values` of shape `(B·L, e)`.
    pub fn segment_weighted_sum(&mut self, values: Var, weights: Var) -> Result<Var> {
        let (vb, e) = self.value(values).shape();
        let (b, l) = self.value(weights).shape();
        if vb != b * l {
            return Err(DiffError::ShapeMismatch {
                op: "segment_weighted_sum",
                lhs: (vb, e),
                rhs: (b, l),
            });
        }
        let v = self.value(values).data();
        let w = self.value(weights).data();
        let mut out = vec![0.0; b * e];
        for bi in 0..b {
            let o = &mut out[bi * e..(bi + 1) * e];
            for li in 0..l {
                let wt = w[bi * l + li];
                if wt == 0.0 {
                    continue;
                }
                let row = &v[(bi * l + li) * e..(bi * l + li + 1) * e];
                for (oo, x) in o.iter_mut().zip(row) {
                    *oo += wt * x;
                }
            }
        }
        let rg = self.rg(values) || self.rg(weights);
        self.push(
            "segment_weighted_sum",
            Tensor::new(b, e, out)?,
            rg,
            Op::SegmentWeightedSum(values, weights),
        )
    }

    /// Gradient reversal: identity forward, `-alpha ×` upstream backward.
    pub fn grl(&mut self, a: Var, alpha: f64) -> Result<Var> {
        if !(alpha >= 0.0) {
            return Err(invalid("grl", format!("alpha must be >= 0, got {alpha}")));
        }
        let out = self.value(a).clone();
        let rg = self.rg(a);
        self.push("grl", out, rg, Op::Grl(a, alpha))
    }

    /// Sum over all column pairs `(i, j)` of the squared in-batch Pearson
    /// correlation between column `i` of `p` and column `j` of `q`:
    ///
    /// `Σ_ij Cov(p_i, q_j)² / ((Cov(p_i, p_i) + eps)(Cov(q_j, q_j) + eps))`
    ///
    /// with `Cov` the unnormalized centered inner product over rows.
    pub fn pearson_pairwise_penalty(&mut self, p: Var, q: Var, eps: f64) -> Result<Var> {
        let sp = self.value(p).shape();
        let sq = self.value(q).shape();
        if sp.0 != sq.0 {
            return Err(DiffError::ShapeMismatch {
                op: "pearson_pairwise_penalty",
                lhs: sp,
                rhs: sq,
            });
        }
        if sp.0 < 2 {
            return Err(invalid("pearson_pairwise_penalty", "needs at least 2 rows"));
        }
        let parts = PearsonParts::compute(self.value(p), self.value(q), eps);
        let rg = self.rg(p) || self.rg(q);
        self.push(
            "pearson_pairwise_penalty",
            Tensor::scalar(parts.penalty()),
            rg,
            Op::Pearson(p, q, eps),
        )
    }

    /// Binary cross-entropy with predictions clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]` and optional per-row weights.
    pub fn binary_cross_entropy(
        &mut self,
        pred: Var,
        targets: &[f64],
        weights: Option<&[f64]>,
        reduction: Reduction,
    ) -> Result<Var> {
        let t = self.value(pred);
        if t.len() != targets.len() || weights.is_some_and(|w| w.len() != targets.len()) {
            return Err(DiffError::ShapeMismatch {
                op: "binary_cross_entropy",
                lhs: t.shape(),
                rhs: (targets.len(), 1),
            });
        }
        if let Some(y) = targets.iter().find(|y| **y != 0.0 && **y != 1.0) {
            return Err(invalid("binary_cross_entropy", format!("target {y} outside {{0, 1}}")));
        }
        let mut loss = 0.0;
        for (i, (&p, &y)) in t.data().iter().zip(targets).enumerate() {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let w = weights.map_or(1.0, |w| w[i]);
            loss -= w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        if reduction == Reduction::Mean && !targets.is_empty() {
            loss /= targets.len() as f64;
        }
        let rg = self.rg(pred);
        self.push(
            "binary_cross_entropy",
            Tensor::scalar(loss),
            rg,
            Op::Bce {
                pred,
                targets: targets.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
                reduction,
            },
        )
    }

    /// Reverse pass from a scalar output. Clears gradients from any earlier
    /// pass first.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(invalid("backward", format!("output must be scalar, got {:?}", self.value(out).shape())));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[out.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn input_grad(&mut self, v: Var) -> Option<&mut Tensor> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape();
        Some(grad_slot(&mut node.grad, shape))
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &Tensor) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).shape();
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let ga = self.input_grad(*a).unwrap();
                    gemm(m, n, k, g.data(), false, &bv, true, ga.data_mut(), 1.0);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data().to_vec();
                    let gb = self.input_grad(*b).unwrap();
                    gemm(k, m, n, &av, true, g.data(), false, gb.data_mut(), 1.0);
                }
            }
            Op::Binary(kind, a, b) => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let (rows, cols) = g.shape();
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let gd = g.data();
                if let Some(ga) = self.input_grad(*a) {
                    let ga = ga.data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            let up = gd[r * cols + c];
                            let d = match kind {
                                BinaryKind::Add | BinaryKind::Sub => up,
                                BinaryKind::Mul => up * bv[bidx(sb, r, c)],
                                BinaryKind::Div => up / bv[bidx(sb, r, c)],
                            };
                            ga[bidx(sa, r, c)] += d;
                        }
                    }
                }
                if let Some(gb) = self.input_grad(*b) {
                    let gb = gb.data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            let up = gd[r * cols + c];
                            let y = bv[bidx(sb, r, c)];
                            let d = match kind {
                                BinaryKind::Add => up,
                                BinaryKind::Sub => -up,
                                BinaryKind::Mul => up * av[bidx(sa, r, c)],
                                BinaryKind::Div => -up * av[bidx(sa, r, c)] / (y * y),
                            };
                            gb[bidx(sb, r, c)] += d;
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.input_grad(*a) {
                    for (x, u) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += f * u;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.input_grad(*a) {
                    for (x, u) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += u;
                    }
                }
            }
            Op::Grl(a, alpha) => {
                let alpha = *alpha;
                if let Some(ga) = self.input_grad(*a) {
                    for (x, u) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += -alpha * u;
                    }
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data().to_vec();
                if let Some(ga) = self.input_grad(*a) {
                    for ((x, u), v) in ga.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                        if *v > 0.0 {
                            *x += u;
                        }
                    }
                }
            }
            Op::PRelu(a, slope) => {
                let (rows, cols) = self.value(*a).shape();
                let xv = self.value(*a).data().to_vec();
                let sv = self.value(*slope).data().to_vec();
                let shared = sv.len() == 1;
                if let Some(ga) = self.input_grad(*a) {
                    let ga = ga.data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            let k = r * cols + c;
                            ga[k] += if xv[k] > 0.0 {
                                g.data()[k]
                            } else {
                                sv[if shared { 0 } else { c }] * g.data()[k]
                            };
                        }
                    }
                }
                if let Some(gs) = self.input_grad(*slope) {
                    let gs = gs.data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            let k = r * cols + c;
                            if xv[k] <= 0.0 {
                                gs[if shared { 0 } else { c }] += xv[k] * g.data()[k];
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.data().to_vec();
                if let Some(ga) = self.input_grad(*a) {
                    for ((x, u), y) in ga.data_mut().iter_mut().zip(g.data()).zip(&yv) {
                        *x += u * y * (1.0 - y);
                    }
                }
            }
            Op::Sqrt(a) => {
                let yv = self.nodes[i].value.data().to_vec();
                if let Some(ga) = self.input_grad(*a) {
                    for ((x, u), y) in ga.data_mut().iter_mut().zip(g.data()).zip(&yv) {
                        *x += u * 0.5 / y;
                    }
                }
            }
            Op::Log(a) => {
                let xv = self.value(*a).data().to_vec();
                if let Some(ga) = self.input_grad(*a) {
                    for ((x, u), v) in ga.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                        *x += u / v;
                    }
                }
            }
            Op::Square(a) => {
                let xv = self.value(*a).data().to_vec();
                if let Some(ga) = self.input_grad(*a) {
                    for ((x, u), v) in ga.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                        *x += 2.0 * v * u;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(gp) = self.input_grad(*p) {
                        let gp = gp.data_mut();
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g.data()[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.input_grad(*p) {
                        for (x, u) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *x += u;
                        }
                    }
                    offset += n;
                }
            }
            Op::GatherRows(a, rows) => {
                let cols = g.cols();
                if let Some(ga) = self.input_grad(*a) {
                    let ga = ga.data_mut();
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            ga[r * cols + c] += g.data()[k * cols + c];
                        }
                    }
                }
            }
            Op::AssembleRows(parts) => {
                let cols = g.cols();
                for (v, positions) in parts {
                    if let Some(gv) = self.input_grad(*v) {
                        let gv = gv.data_mut();
                        for (k, &p) in positions.iter().enumerate() {
                            for c in 0..cols {
                                gv[k * cols + c] += g.data()[p * cols + c];
                            }
                        }
                    }
                }
            }
            Op::MeanRows(a, mask) => {
                let rows = self.value(*a).rows();
                let n = mask.as_ref().map_or(rows as f64, |m| m.iter().sum());
                let cols = g.cols();
                if let Some(ga) = self.input_grad(*a) {
                    let ga = ga.data_mut();
                    for r in 0..rows {
                        let w = mask.as_ref().map_or(1.0, |m| m[r]) / n;
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            ga[r * cols + c] += w * g.data()[c];
                        }
                    }
                }
            }
            Op::VarRows(a, mask) => {
                let t = self.value(*a);
                let rows = t.rows();
                let cols = t.cols();
                let n = mask.as_ref().map_or(rows as f64, |m| m.iter().sum());
                let mean = masked_mean(t, mask.as_deref(), n);
                let xv = t.data().to_vec();
                if let Some(ga) = self.input_grad(*a) {
                    let ga = ga.data_mut();
                    for r in 0..rows {
                        let w = mask.as_ref().map_or(1.0, |m| m[r]);
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            ga[r * cols + c] += g.data()[c] * 2.0 * w * (xv[r * cols + c] - mean.data()[c]) / n;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let up = g.item();
                if let Some(ga) = self.input_grad(*a) {
                    ga.data_mut().iter_mut().for_each(|x| *x += up);
                }
            }
            Op::MaskedSoftmax(scores, valid) => {
                let yv = self.nodes[i].value.clone();
                let (rows, cols) = yv.shape();
                if let Some(gs) = self.input_grad(*scores) {
                    let gs = gs.data_mut();
                    for r in 0..rows {
                        let y = yv.row_slice(r);
                        let u = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            if valid[r * cols + c] {
                                gs[r * cols + c] += y[c] * (u[c] - dot);
                            }
                        }
                    }
                }
            }
            Op::SegmentWeightedSum(values, weights) => {
                let (b, l) = self.value(*weights).shape();
                let e = g.cols();
                let wv = self.value(*weights).data().to_vec();
                let vv = self.value(*values).data().to_vec();
                if let Some(gv) = self.input_grad(*values) {
                    let gv = gv.data_mut();
                    for bi in 0..b {
                        let up = &g.data()[bi * e..(bi + 1) * e];
                        for li in 0..l {
                            let w = wv[bi * l + li];
                            if w == 0.0 {
                                continue;
                            }
                            let row = &mut gv[(bi * l + li) * e..(bi * l + li + 1) * e];
                            for (x, u) in row.iter_mut().zip(up) {
                                *x += w * u;
                            }
                        }
                    }
                }
                if let Some(gw) = self.input_grad(*weights) {
                    let gw = gw.data_mut();
                    for bi in 0..b {
                        let up = &g.data()[bi * e..(bi + 1) * e];
                        for li in 0..l {
                            let row = &vv[(bi * l + li) * e..(bi * l + li + 1) * e];
                            gw[bi * l + li] += row.iter().zip(up).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            Op::Pearson(p, q, eps) => {
                let parts = PearsonParts::compute(self.value(*p), self.value(*q), *eps);
                let up = g.item();
                let (dp, dq) = parts.gradients();
                if let Some(gp) = self.input_grad(*p) {
                    for (x, d) in gp.data_mut().iter_mut().zip(dp.data()) {
                        *x += up * d;
                    }
                }
                if let Some(gq) = self.input_grad(*q) {
                    for (x, d) in gq.data_mut().iter_mut().zip(dq.data()) {
                        *x += up * d;
                    }
                }
            }
            Op::Bce {
                pred,
                targets,
                weights,
                reduction,
            } => {
                let pv = self.value(*pred).data().to_vec();
                let scale = match reduction {
                    Reduction::Sum => g.item(),
                    Reduction::Mean => g.item() / targets.len().max(1) as f64,
                };
                if let Some(gp) = self.input_grad(*pred) {
                    for (k, x) in gp.data_mut().iter_mut().enumerate() {
                        let p = pv[k];
                        if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                            continue;
                        }
                        let y = targets[k];
                        let w = weights.as_ref().map_or(1.0, |w| w[k]);
                        *x += scale * -w * (y / p - (1.0 - y) / (1.0 - p));
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn masked_mean(t: &Tensor, mask: Option<&[f64]>, n: f64) -> Tensor {
    let cols = t.cols();
    let mut out = vec![0.0; cols];
    for r in 0..t.rows() {
        let w = mask.map_or(1.0, |m| m[r]);
        if w == 0.0 {
            continue;
        }
        for (c, o) in out.iter_mut().enumerate() {
            *o += w * t.get(r, c);
        }
    }
    out.iter_mut().for_each(|x| *x /= n);
    Tensor::row(&out)
}

/// Centered columns and covariance blocks shared by the forward value and
/// the hand-derived backward of the pairwise Pearson penalty.
struct PearsonParts {
    pc: Tensor,
    qc: Tensor,
    /// `Pcᵀ Qc`, `(dp, dq)`.
    cross: Tensor,
    /// `Cov(p_i, p_i) + eps`.
    pvar: Vec<f64>,
    /// `Cov(q_j, q_j) + eps`.
    qvar: Vec<f64>,
}

fn center_columns(t: &Tensor) -> Tensor {
    let mean = masked_mean(t, None, t.rows() as f64);
    let mut out = t.clone();
    let cols = t.cols();
    for (k, x) in out.data_mut().iter_mut().enumerate() {
        *x -= mean.data()[k % cols];
    }
    out
}

impl PearsonParts {
    fn compute(p: &Tensor, q: &Tensor, eps: f64) -> Self {
        let pc = center_columns(p);
        let qc = center_columns(q);
        let (b, dp) = pc.shape();
        let dq = qc.cols();
        let mut cross = Tensor::zeros(dp, dq);
        gemm(dp, b, dq, pc.data(), true, qc.data(), false, cross.data_mut(), 0.0);
        let col_sq = |t: &Tensor| {
            let mut v = vec![eps; t.cols()];
            for r in 0..t.rows() {
                for (c, x) in t.row_slice(r).iter().enumerate() {
                    v[c] += x * x;
                }
            }
            v
        };
        let pvar = col_sq(&pc);
        let qvar = col_sq(&qc);
        Self {
            pc,
            qc,
            cross,
            pvar,
            qvar,
        }
    }

    fn penalty(&self) -> f64 {
        let dq = self.qvar.len();
        let mut s = 0.0;
        for (i, a) in self.pvar.iter().enumerate() {
            for (j, b) in self.qvar.iter().enumerate() {
                let c = self.cross.data()[i * dq + j];
                s += c * c / (a * b);
            }
        }
        s
    }

    fn gradients(&self) -> (Tensor, Tensor) {
        let (b, dp) = self.pc.shape();
        let dq = self.qc.cols();
        // G_ij = ∂L/∂C_ij; row/column sums of Υ² drive the variance terms.
        let mut gmat = Tensor::zeros(dp, dq);
        let mut dpvar = vec![0.0; dp];
        let mut dqvar = vec![0.0; dq];
        for i in 0..dp {
            for j in 0..dq {
                let c = self.cross.data()[i * dq + j];
                let denom = self.pvar[i] * self.qvar[j];
                gmat.data_mut()[i * dq + j] = 2.0 * c / denom;
                let u2 = c * c / denom;
                dpvar[i] -= u2 / self.pvar[i];
                dqvar[j] -= u2 / self.qvar[j];
            }
        }
        let mut dpc = Tensor::zeros(b, dp);
        gemm(b, dq, dp, self.qc.data(), false, gmat.data(), true, dpc.data_mut(), 0.0);
        let mut dqc = Tensor::zeros(b, dq);
        gemm(b, dp, dq, self.pc.data(), false, gmat.data(), false, dqc.data_mut(), 0.0);
        for r in 0..b {
            for i in 0..dp {
                dpc.data_mut()[r * dp + i] += 2.0 * self.pc.data()[r * dp + i] * dpvar[i];
            }
            for j in 0..dq {
                dqc.data_mut()[r * dq + j] += 2.0 * self.qc.data()[r * dq + j] * dqvar[j];
            }
        }
        // Centering is a symmetric projection, so its adjoint is itself.
        (center_columns(&dpc), center_columns(&dqc))
    }
}
