//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive operation in execution order. Values
//! are computed eagerly when an op is recorded; [`Tape::backward`] walks the
//! record in reverse and accumulates adjoints into the parameter leaves.
//!
//! ```
//! use gnstode::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::row(&[1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: bool },
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum { input: usize, axis: Option<usize> },
    Tanh(usize),
    Relu(usize),
    SegmentSum {
        input: usize,
        indices: Arc<[usize]>,
        out_rows: usize,
    },
    GatherRows { input: usize, indices: Arc<[usize]> },
    BroadcastRow { input: usize, rows: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Single-writer record of a computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every parameter leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf; `None` for constants and op outputs.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err(op, a, b))
    }
}

fn check_indices(op: &'static str, indices: &[usize], bound: usize) -> Result<()> {
    match indices.iter().find(|&&i| i >= bound) {
        Some(&index) => Err(Error::Index { op, index, bound }),
        None => Ok(()),
    }
}

/// Forward semantics of every primitive. Shared by recording and replay.
fn evaluate(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let v = |i: usize| &nodes[i].value;
    Ok(match op {
        Op::Leaf { .. } => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => {
            let (a, b) = (v(*a), v(*b));
            a.require_rank2("matmul")?;
            b.require_rank2("matmul")?;
            if a.shape()[1] != b.shape()[0] {
                return Err(shape_err("matmul", a, b));
            }
            gemm(a, false, b, false)
        }
        Op::Add(a, b) => {
            check_same("add", v(*a), v(*b))?;
            v(*a).zip_map(v(*b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            check_same("sub", v(*a), v(*b))?;
            v(*a).zip_map(v(*b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            check_same("mul", v(*a), v(*b))?;
            v(*a).zip_map(v(*b), |x, y| x * y)
        }
        Op::Scale(a, s) => v(*a).map(|x| x * s),
        Op::Concat { inputs, axis } => concat(inputs.iter().map(|&i| v(i)), *axis)?,
        Op::Slice {
            input,
            axis,
            start,
            len,
        } => slice(v(*input), *axis, *start, *len)?,
        Op::Sum { input, axis } => sum(v(*input), *axis)?,
        Op::Tanh(a) => {
            let x = v(*a);
            Tensor::new(x.shape().to_vec(), super::fastmath::tanh_slice(x.data()))?
        }
        Op::Relu(a) => v(*a).map(|x| x.max(0.0)),
        Op::SegmentSum {
            input,
            indices,
            out_rows,
        } => {
            let a = v(*input);
            a.require_rank2("segment_sum")?;
            if a.rows() != indices.len() {
                return Err(Error::Shape {
                    op: "segment_sum",
                    lhs: a.shape().to_vec(),
                    rhs: vec![indices.len()],
                });
            }
            check_indices("segment_sum", indices, *out_rows)?;
            scatter_rows(a, indices, *out_rows)
        }
        Op::GatherRows { input, indices } => {
            let a = v(*input);
            a.require_rank2("gather_rows")?;
            check_indices("gather_rows", indices, a.rows())?;
            gather_rows(a, indices)
        }
        Op::BroadcastRow { input, rows } => {
            let a = v(*input);
            a.require_rank2("broadcast_row")?;
            if a.rows() != 1 {
                return Err(Error::Shape {
                    op: "broadcast_row",
                    lhs: a.shape().to_vec(),
                    rhs: vec![1, a.cols()],
                });
            }
            let mut data = Vec::with_capacity(rows * a.cols());
            for _ in 0..*rows {
                data.extend_from_slice(a.data());
            }
            Tensor::matrix(*rows, a.cols(), data)
        }
    })
}

fn concat<'a>(parts: impl Iterator<Item = &'a Tensor> + Clone, axis: usize) -> Result<Tensor> {
    let first = parts
        .clone()
        .next()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    for p in parts.clone() {
        p.require_rank2("concat")?;
    }
    match axis {
        0 => {
            let cols = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                if p.cols() != cols {
                    return Err(shape_err("concat", first, p));
                }
                rows += p.rows();
                data.extend_from_slice(p.data());
            }
            Ok(Tensor::matrix(rows, cols, data))
        }
        1 => {
            let rows = first.rows();
            let mut cols = 0;
            for p in parts.clone() {
                if p.rows() != rows {
                    return Err(shape_err("concat", first, p));
                }
                cols += p.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts.clone() {
                    let c = p.cols();
                    data.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
                }
            }
            Ok(Tensor::matrix(rows, cols, data))
        }
        _ => Err(Error::invalid(format!("concat axis {axis} on rank-2 tensors"))),
    }
}

fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    a.require_rank2("slice")?;
    let extent = match axis {
        0 => a.rows(),
        1 => a.cols(),
        _ => return Err(Error::invalid(format!("slice axis {axis}"))),
    };
    if start + len > extent {
        return Err(Error::Index {
            op: "slice",
            index: start + len,
            bound: extent,
        });
    }
    let cols = a.cols();
    Ok(if axis == 0 {
        Tensor::matrix(len, cols, a.data()[start * cols..(start + len) * cols].to_vec())
    } else {
        let mut data = Vec::with_capacity(a.rows() * len);
        for r in 0..a.rows() {
            data.extend_from_slice(&a.data()[r * cols + start..r * cols + start + len]);
        }
        Tensor::matrix(a.rows(), len, data)
    })
}

fn sum(a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => Ok(Tensor::scalar(a.sum())),
        Some(0) => {
            a.require_rank2("sum")?;
            let cols = a.cols();
            let mut out = vec![0.0; cols];
            for row in a.data().chunks(cols.max(1)) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            Ok(Tensor::matrix(1, cols, out))
        }
        Some(1) => {
            a.require_rank2("sum")?;
            let cols = a.cols();
            let out = (0..a.rows())
                .map(|r| a.data()[r * cols..(r + 1) * cols].iter().sum())
                .collect();
            Ok(Tensor::matrix(a.rows(), 1, out))
        }
        Some(axis) => Err(Error::invalid(format!("sum axis {axis}"))),
    }
}

fn scatter_rows(a: &Tensor, indices: &[usize], out_rows: usize) -> Tensor {
    let cols = a.cols();
    let mut out = vec![0.0; out_rows * cols];
    for (r, &dst) in indices.iter().enumerate() {
        let src = &a.data()[r * cols..(r + 1) * cols];
        for (o, x) in out[dst * cols..(dst + 1) * cols].iter_mut().zip(src) {
            *o += x;
        }
    }
    Tensor::matrix(out_rows, cols, out)
}

fn gather_rows(a: &Tensor, indices: &[usize]) -> Tensor {
    let cols = a.cols();
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &src in indices {
        data.extend_from_slice(&a.data()[src * cols..(src + 1) * cols]);
    }
    Tensor::matrix(indices.len(), cols, data)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor, param: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { param },
            value,
            needs_grad: param,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Trainable leaf; [`Tape::backward`] reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.index].value
    }

    fn record(&mut self, op: Op, inputs: &[usize]) -> Result<Var> {
        let value = evaluate(&op, &self.nodes)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.record(Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.record(Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.record(Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.record(Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Scale(a, s), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let inputs = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let deps = inputs.clone();
        self.record(Op::Concat { inputs, axis }, &deps)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let input = self.idx(a)?;
        self.record(
            Op::Slice {
                input,
                axis,
                start,
                len,
            },
            &[input],
        )
    }

    /// Sum along `axis` (0 → row vector, 1 → column vector).
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let input = self.idx(a)?;
        self.record(
            Op::Sum {
                input,
                axis: Some(axis),
            },
            &[input],
        )
    }

    /// Sum of every entry, as a `1 × 1` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let input = self.idx(a).expect("variable from a different tape");
        self.record(Op::Sum { input, axis: None }, &[input])
            .expect("total sum cannot fail")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Relu(a), &[a])
    }

    /// Adds row `r` of `a` into output row `indices[r]`.
    pub fn segment_sum(&mut self, a: Var, indices: Arc<[usize]>, out_rows: usize) -> Result<Var> {
        let input = self.idx(a)?;
        self.record(
            Op::SegmentSum {
                input,
                indices,
                out_rows,
            },
            &[input],
        )
    }

    /// Output row `r` is row `indices[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: Arc<[usize]>) -> Result<Var> {
        let input = self.idx(a)?;
        self.record(Op::GatherRows { input, indices }, &[input])
    }

    /// Repeats a `1 × c` row `rows` times.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Result<Var> {
        let input = self.idx(a)?;
        self.record(Op::BroadcastRow { input, rows }, &[input])
    }

    /// `x + 1·b` for a `1 × c` bias row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        let bb = self.broadcast_row(b, rows)?;
        self.add(x, bb)
    }

    /// Recomputes every non-leaf node from its recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut nodes: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf { .. } => node.value.clone(),
                ref op => evaluate(op, &nodes)?,
            };
            nodes.push(Node {
                op: node.op.clone(),
                value,
                needs_grad: node.needs_grad,
            });
        }
        Ok(nodes.into_iter().map(|n| n.value).collect())
    }

    /// Values as currently recorded, in tape order.
    pub fn recorded_values(&self) -> Vec<&Tensor> {
        self.nodes.iter().map(|n| &n.value).collect()
    }

    /// Gradient of the scalar `loss` with respect to every parameter leaf.
    ///
    /// Parameters the loss does not depend on get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        let lv = &self.nodes[root].value;
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root + 1];
        adj[root] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf { .. }) || !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf { param: true } => Some(
                    adj.get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| Tensor::zeros(n.value.shape())),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], i: usize, g: Tensor) {
        if !self.nodes[i].needs_grad {
            return;
        }
        match &mut adj[i] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        let needs = |i: usize| self.nodes[i].needs_grad;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    self.accumulate(adj, *a, gemm(g, false, val(*b), true));
                }
                if needs(*b) {
                    self.accumulate(adj, *b, gemm(val(*a), true, g, false));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                if needs(*b) {
                    self.accumulate(adj, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accumulate(adj, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if needs(*b) {
                    self.accumulate(adj, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, g.map(|x| x * s)),
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &p in inputs {
                    let extent = if *axis == 0 {
                        val(p).rows()
                    } else {
                        val(p).cols()
                    };
                    if needs(p) {
                        let part = slice(g, *axis, offset, extent).expect("concat adjoint");
                        self.accumulate(adj, p, part);
                    }
                    offset += extent;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let src = val(*input);
                let cols = src.cols();
                let mut out = Tensor::zeros(src.shape());
                let buf = out.data_mut();
                if *axis == 0 {
                    buf[start * cols..(start + len) * cols].copy_from_slice(g.data());
                } else {
                    for r in 0..src.rows() {
                        buf[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                }
                self.accumulate(adj, *input, out);
            }
            Op::Sum { input, axis } => {
                let src = val(*input);
                let cols = src.cols();
                let mut out = Tensor::zeros(src.shape());
                let buf = out.data_mut();
                for (k, o) in buf.iter_mut().enumerate() {
                    *o = match axis {
                        None => g.item(),
                        Some(0) => g.data()[k % cols],
                        _ => g.data()[k / cols],
                    };
                }
                self.accumulate(adj, *input, out);
            }
            Op::Tanh(a) => {
                let grad = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                self.accumulate(adj, *a, grad);
            }
            Op::Relu(a) => {
                let grad = g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                self.accumulate(adj, *a, grad);
            }
            Op::SegmentSum { input, indices, .. } => {
                self.accumulate(adj, *input, gather_rows(g, indices));
            }
            Op::GatherRows { input, indices } => {
                let rows = val(*input).rows();
                self.accumulate(adj, *input, scatter_rows(g, indices, rows));
            }
            Op::BroadcastRow { input, .. } => {
                let summed = sum(g, Some(0)).expect("broadcast adjoint");
                self.accumulate(adj, *input, summed);
            }
        }
    }
}
