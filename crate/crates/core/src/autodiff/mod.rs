//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every primitive is evaluated eagerly when it is recorded on a [`Tape`];
//! [`Tape::backward`] then sweeps the tape in decreasing node order and
//! accumulates adjoints into the operands of each node. Because node ids are
//! assigned in recording order, operands always precede their consumers and
//! the sweep order (and therefore every floating-point sum) is fixed.
//!
//! ```
//! use mfc_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[6.0]);
//! ```

mod kernels;
mod tensor;

pub use tensor::Tensor;

use kernels::{conv_backward, conv_forward, gemm, sigmoid, ConvGeom};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible operand shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("invalid tensor: shape {shape:?} holds {expected} elements, data has {got}")]
    InvalidTensor {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must hold a single element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A recorded primitive together with its operand handles.
///
/// Row vectors are `[1, k]` matrices; per-particle quantities are `[n, k]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Input or parameter; no operands.
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product.
    Mul(Var, Var),
    /// `[n, k] + [1, k]`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    /// `[m, k] x [k, n]`.
    MatMul(Var, Var),
    /// `x w + b` with `x: [n, k]`, `w: [k, m]`, `b: [1, m]`.
    Affine { x: Var, weight: Var, bias: Var },
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Powi(Var, i32),
    Clamp { x: Var, lo: f64, hi: f64 },
    /// Sum of all entries, shape `[1]`.
    Sum(Var),
    /// `[n, k] -> [1, k]`.
    SumRows(Var),
    /// `[n, k] -> [1, k]`.
    MeanRows(Var),
    /// Like `MeanRows`, but each column is summed in ascending order so the
    /// value does not depend on the row order.
    SortedMeanRows(Var),
    /// `[n, k] -> [n, 1]`.
    SumCols(Var),
    /// `[1, k] -> [n, k]`.
    BroadcastRows(Var, usize),
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var, Vec<usize>),
    /// `[ci, l] * [co, ci, kl] + [co] -> [co, l - kl + 1]`.
    Conv1d { input: Var, kernel: Var, bias: Var },
    /// `[ci, h, w] * [co, ci, kh, kw] + [co] -> [co, h - kh + 1, w - kw + 1]`.
    Conv2d { input: Var, kernel: Var, bias: Var },
    /// Row `i` of the `[n, 1]` output is `(1/n) sum_j exp(-|x_i - x_j|^2 / (2 h^2))`
    /// for `x: [n, d]` and bandwidth `h`.
    GaussianKernelMean { x: Var, bandwidth: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Powi(..) => "powi",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::SortedMeanRows(_) => "sorted_mean_rows",
            Op::SumCols(_) => "sum_cols",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::GaussianKernelMean { .. } => "gaussian_kernel_mean",
        }
    }

    pub fn operands(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Powi(a, _)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::MeanRows(a)
            | Op::SortedMeanRows(a)
            | Op::SumCols(a)
            | Op::BroadcastRows(a, _)
            | Op::Reshape(a, _) => vec![*a],
            Op::Clamp { x, .. } | Op::SliceCols { x, .. } | Op::GaussianKernelMean { x, .. } => {
                vec![*x]
            }
            Op::Affine { x, weight, bias } => vec![*x, *weight, *bias],
            Op::Conv1d {
                input,
                kernel,
                bias,
            }
            | Op::Conv2d {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of evaluated primitives.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves reachable from a backward root.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` if the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `var`, zero-filled when the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.rank() == 2
}

fn is_row_of(row: &Tensor, cols: usize) -> bool {
    row.rank() == 2 && row.shape()[0] == 1 && row.shape()[1] == cols
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map preserves shape")
}

/// Column sums of a rank-2 tensor as a `[1, k]` row.
fn column_sums(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut out = vec![0.0; cols];
    for row in t.data().chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::row(out)
}

/// Column sums taken over each column's values in ascending order.
pub fn sorted_column_sums(t: &Tensor) -> Tensor {
    let (rows, cols) = (t.rows(), t.cols());
    let mut column = Vec::with_capacity(rows);
    let out = (0..cols)
        .map(|j| {
            column.clear();
            column.extend((0..rows).map(|i| t.data()[i * cols + j]));
            column.sort_unstable_by(f64::total_cmp);
            column.iter().sum()
        })
        .collect();
    Tensor::row(out)
}

fn conv_geom(op: &'static str, input: &Tensor, kernel: &Tensor, bias: &Tensor, two_d: bool) -> Result<ConvGeom> {
    let bad = || mismatch(op, &[input.shape(), kernel.shape(), bias.shape()]);
    let geom = if two_d {
        if input.rank() != 3 || kernel.rank() != 4 {
            return Err(bad());
        }
        let (i, k) = (input.shape(), kernel.shape());
        ConvGeom {
            in_channels: i[0],
            out_channels: k[0],
            height: i[1],
            width: i[2],
            kernel_h: k[2],
            kernel_w: k[3],
        }
    } else {
        if input.rank() != 2 || kernel.rank() != 3 {
            return Err(bad());
        }
        let (i, k) = (input.shape(), kernel.shape());
        ConvGeom {
            in_channels: i[0],
            out_channels: k[0],
            height: 1,
            width: i[1],
            kernel_h: 1,
            kernel_w: k[2],
        }
    };
    let kernel_in = kernel.shape()[1];
    if kernel_in != geom.in_channels
        || geom.kernel_h > geom.height
        || geom.kernel_w > geom.width
        || bias.len() != geom.out_channels
    {
        return Err(bad());
    }
    Ok(geom)
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

    /// Drops every node with id `>= len`. Handles to dropped nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn op(&self, var: Var) -> &Op {
        &self.nodes[var.0].op
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { op: Op::Leaf, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Evaluates `op` on the current operand values and appends it.
    pub fn record(&mut self, op: Op) -> Result<Var> {
        if matches!(op, Op::Leaf) {
            return Err(mismatch("leaf", &[]));
        }
        for v in op.operands() {
            if v.0 >= self.nodes.len() {
                return Err(AutodiffError::UnknownNode(v.0));
            }
        }
        let value = self.forward(&op)?;
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow(a, row))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Shift(a, c))
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.record(Op::Affine { x, weight, bias })
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Square(a))
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sqrt(a))
    }
    pub fn powi(&mut self, a: Var, k: i32) -> Result<Var> {
        self.record(Op::Powi(a, k))
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.record(Op::Clamp { x, lo, hi })
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumRows(a))
    }
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::MeanRows(a))
    }
    pub fn sorted_mean_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SortedMeanRows(a))
    }
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumCols(a))
    }
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        self.record(Op::BroadcastRows(row, n))
    }
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceCols { x, start, len })
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatCols(parts.to_vec()))
    }
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.record(Op::Reshape(a, shape))
    }
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.record(Op::Conv1d {
            input,
            kernel,
            bias,
        })
    }
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.record(Op::Conv2d {
            input,
            kernel,
            bias,
        })
    }
    pub fn gaussian_kernel_mean(&mut self, x: Var, bandwidth: f64) -> Result<Var> {
        self.record(Op::GaussianKernelMean { x, bandwidth })
    }

    fn forward(&self, op: &Op) -> Result<Tensor> {
        let v = |var: &Var| &self.nodes[var.0].value;
        let name = op.name();
        Ok(match op {
            Op::Leaf => unreachable!("leaves are inserted directly"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape() != b.shape() {
                    return Err(mismatch(name, &[a.shape(), b.shape()]));
                }
                match op {
                    Op::Add(..) => zip_map(a, b, |x, y| x + y),
                    Op::Sub(..) => zip_map(a, b, |x, y| x - y),
                    _ => zip_map(a, b, |x, y| x * y),
                }
            }
            Op::AddRow(a, r) => {
                let (a, r) = (v(a), v(r));
                if !is_matrix(a) || !is_row_of(r, a.cols()) {
                    return Err(mismatch(name, &[a.shape(), r.shape()]));
                }
                let mut out = a.clone();
                for row in out.data_mut().chunks_exact_mut(r.len()) {
                    for (o, b) in row.iter_mut().zip(r.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Scale(a, c) => v(a).map(|x| x * c),
            Op::Shift(a, c) => v(a).map(|x| x + c),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if !is_matrix(a) || !is_matrix(b) || a.cols() != b.rows() {
                    return Err(mismatch(name, &[a.shape(), b.shape()]));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
                Tensor::new(vec![m, n], out)?
            }
            Op::Affine { x, weight, bias } => {
                let (x, w, b) = (v(x), v(weight), v(bias));
                if !is_matrix(x) || !is_matrix(w) || x.cols() != w.rows() || !is_row_of(b, w.cols()) {
                    return Err(mismatch(name, &[x.shape(), w.shape(), b.shape()]));
                }
                let (m, k, n) = (x.rows(), x.cols(), w.cols());
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..m {
                    out.extend_from_slice(b.data());
                }
                gemm(m, k, n, x.data(), false, w.data(), false, &mut out, 1.0);
                Tensor::new(vec![m, n], out)?
            }
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Square(a) => v(a).map(|x| x * x),
            Op::Sqrt(a) => v(a).map(f64::sqrt),
            Op::Powi(a, k) => v(a).map(|x| x.powi(*k)),
            Op::Clamp { x, lo, hi } => {
                if lo > hi {
                    return Err(mismatch(name, &[v(x).shape()]));
                }
                v(x).map(|t| t.clamp(*lo, *hi))
            }
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::SumRows(a) | Op::MeanRows(a) => {
                let a = v(a);
                if !is_matrix(a) {
                    return Err(mismatch(name, &[a.shape()]));
                }
                let sums = column_sums(a);
                if matches!(op, Op::MeanRows(_)) {
                    let n = a.rows() as f64;
                    sums.map(|s| s / n)
                } else {
                    sums
                }
            }
            Op::SortedMeanRows(a) => {
                let a = v(a);
                if !is_matrix(a) {
                    return Err(mismatch(name, &[a.shape()]));
                }
                let n = a.rows() as f64;
                sorted_column_sums(a).map(|s| s / n)
            }
            Op::SumCols(a) => {
                let a = v(a);
                if !is_matrix(a) {
                    return Err(mismatch(name, &[a.shape()]));
                }
                let sums = a.data().chunks_exact(a.cols()).map(|r| r.iter().sum()).collect();
                Tensor::new(vec![a.rows(), 1], sums)?
            }
            Op::BroadcastRows(r, n) => {
                let r = v(r);
                if *n == 0 || !is_matrix(r) || r.rows() != 1 {
                    return Err(mismatch(name, &[r.shape()]));
                }
                let mut out = Vec::with_capacity(n * r.len());
                for _ in 0..*n {
                    out.extend_from_slice(r.data());
                }
                Tensor::new(vec![*n, r.cols()], out)?
            }
            Op::SliceCols { x, start, len } => {
                let x = v(x);
                if !is_matrix(x) || *len == 0 || start + len > x.cols() {
                    return Err(mismatch(name, &[x.shape()]));
                }
                let mut out = Vec::with_capacity(x.rows() * len);
                for row in x.data().chunks_exact(x.cols()) {
                    out.extend_from_slice(&row[*start..start + len]);
                }
                Tensor::new(vec![x.rows(), *len], out)?
            }
            Op::ConcatCols(parts) => {
                let vals: Vec<&Tensor> = parts.iter().map(v).collect();
                let shapes: Vec<&[usize]> = vals.iter().map(|t| t.shape()).collect();
                let Some(first) = vals.first() else {
                    return Err(mismatch(name, &[]));
                };
                if vals.iter().any(|t| !is_matrix(t) || t.rows() != first.rows()) {
                    return Err(mismatch(name, &shapes));
                }
                let rows = first.rows();
                let cols: usize = vals.iter().map(|t| t.cols()).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for t in &vals {
                        out.extend_from_slice(&t.data()[i * t.cols()..(i + 1) * t.cols()]);
                    }
                }
                Tensor::new(vec![rows, cols], out)?
            }
            Op::Reshape(a, shape) => {
                let a = v(a);
                a.clone()
                    .reshaped(shape.clone())
                    .map_err(|_| mismatch(name, &[a.shape(), shape]))?
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
            }
            | Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let two_d = matches!(op, Op::Conv2d { .. });
                let (i, k, b) = (v(input), v(kernel), v(bias));
                let g = conv_geom(name, i, k, b, two_d)?;
                let out = conv_forward(&g, i.data(), k.data(), b.data());
                if two_d {
                    Tensor::new(vec![g.out_channels, g.out_h(), g.out_w()], out)?
                } else {
                    Tensor::new(vec![g.out_channels, g.out_w()], out)?
                }
            }
            Op::GaussianKernelMean { x, bandwidth } => {
                let x = v(x);
                if !is_matrix(x) || bandwidth.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                    return Err(mismatch(name, &[x.shape()]));
                }
                let (n, d) = (x.rows(), x.cols());
                let inv = 1.0 / (2.0 * bandwidth * bandwidth);
                let mut out = vec![0.0; n];
                for (i, o) in out.iter_mut().enumerate() {
                    let xi = &x.data()[i * d..(i + 1) * d];
                    let mut acc = 0.0;
                    for j in 0..n {
                        let xj = &x.data()[j * d..(j + 1) * d];
                        let r2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                        acc += (-r2 * inv).exp();
                    }
                    *o = acc / n as f64;
                }
                Tensor::new(vec![n, 1], out)?
            }
        })
    }

    /// Reverse sweep from a single-element `root`.
    ///
    /// The returned map holds adjoints for the leaves the root depends on;
    /// adjoints of interior nodes are released as soon as they have been
    /// propagated.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self.nodes.get(root.0).ok_or(AutodiffError::UnknownNode(root.0))?;
        if root_node.value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::filled(root_node.value.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.propagate(node, &g, &mut adj);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes[..=root.0].iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |var: &Var| &self.nodes[var.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(adj, *a, zip_map(g, val(b), |x, y| x * y));
                accumulate(adj, *b, zip_map(g, val(a), |x, y| x * y));
            }
            Op::AddRow(a, r) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *r, column_sums(g));
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.map(|x| x * c)),
            Op::Shift(a, _) => accumulate(adj, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, 0.0);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, 0.0);
                accumulate(adj, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                accumulate(adj, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
            }
            Op::Affine { x, weight, bias } => {
                let (xv, wv) = (val(x), val(weight));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                let mut gx = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, wv.data(), true, &mut gx, 0.0);
                let mut gw = vec![0.0; k * n];
                gemm(k, m, n, xv.data(), true, g.data(), false, &mut gw, 0.0);
                accumulate(adj, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                accumulate(adj, *weight, Tensor::new(wv.shape().to_vec(), gw).unwrap());
                accumulate(adj, *bias, column_sums(g));
            }
            Op::Sigmoid(a) => accumulate(adj, *a, zip_map(g, out, |x, s| x * s * (1.0 - s))),
            Op::Exp(a) => accumulate(adj, *a, zip_map(g, out, |x, e| x * e)),
            Op::Square(a) => accumulate(adj, *a, zip_map(g, val(a), |x, y| 2.0 * x * y)),
            Op::Sqrt(a) => accumulate(adj, *a, zip_map(g, out, |x, r| x / (2.0 * r))),
            Op::Powi(a, k) => {
                let k = *k;
                let d = zip_map(g, val(a), |x, y| {
                    if k == 0 {
                        0.0
                    } else {
                        x * k as f64 * y.powi(k - 1)
                    }
                });
                accumulate(adj, *a, d);
            }
            Op::Clamp { x, lo, hi } => {
                let d = zip_map(g, val(x), |u, t| if t >= *lo && t <= *hi { u } else { 0.0 });
                accumulate(adj, *x, d);
            }
            Op::Sum(a) => accumulate(adj, *a, Tensor::filled(val(a).shape(), g.data()[0])),
            Op::SumRows(a) | Op::MeanRows(a) | Op::SortedMeanRows(a) => {
                let av = val(a);
                let factor = if matches!(node.op, Op::MeanRows(_) | Op::SortedMeanRows(_)) {
                    1.0 / av.rows() as f64
                } else {
                    1.0
                };
                let mut d = Vec::with_capacity(av.len());
                for _ in 0..av.rows() {
                    d.extend(g.data().iter().map(|x| x * factor));
                }
                accumulate(adj, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
            }
            Op::SumCols(a) => {
                let av = val(a);
                let mut d = Vec::with_capacity(av.len());
                for &gi in g.data() {
                    d.extend(std::iter::repeat(gi).take(av.cols()));
                }
                accumulate(adj, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
            }
            Op::BroadcastRows(r, _) => accumulate(adj, *r, column_sums(g)),
            Op::SliceCols { x, start, len } => {
                let xv = val(x);
                let mut d = Tensor::zeros(xv.shape());
                let cols = xv.cols();
                for (i, row) in g.data().chunks_exact(*len).enumerate() {
                    d.data_mut()[i * cols + start..i * cols + start + len].copy_from_slice(row);
                }
                accumulate(adj, *x, d);
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = val(p);
                    let c = pv.cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                    }
                    accumulate(adj, *p, Tensor::new(pv.shape().to_vec(), d).unwrap());
                    offset += c;
                }
            }
            Op::Reshape(a, _) => {
                let d = g.clone().reshaped(val(a).shape().to_vec()).unwrap();
                accumulate(adj, *a, d);
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
            }
            | Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let two_d = matches!(node.op, Op::Conv2d { .. });
                let (iv, kv, bv) = (val(input), val(kernel), val(bias));
                let geom = conv_geom(node.op.name(), iv, kv, bv, two_d).expect("validated in forward");
                let (di, dk, db) = conv_backward(&geom, iv.data(), kv.data(), g.data());
                accumulate(adj, *input, Tensor::new(iv.shape().to_vec(), di).unwrap());
                accumulate(adj, *kernel, Tensor::new(kv.shape().to_vec(), dk).unwrap());
                accumulate(adj, *bias, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::GaussianKernelMean { x, bandwidth } => {
                let xv = val(x);
                let (n, d) = (xv.rows(), xv.cols());
                let h2 = bandwidth * bandwidth;
                let inv = 1.0 / (2.0 * h2);
                let xs = xv.data();
                let gs = g.data();
                let mut dx = vec![0.0; n * d];
                let scale = 1.0 / (n as f64 * h2);
                for m in 0..n {
                    let xm = &xs[m * d..(m + 1) * d];
                    for j in 0..n {
                        if j == m {
                            continue;
                        }
                        let xj = &xs[j * d..(j + 1) * d];
                        let r2: f64 = xm.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                        let w = (gs[m] + gs[j]) * (-r2 * inv).exp() * scale;
                        for c in 0..d {
                            dx[m * d + c] += w * (xj[c] - xm[c]);
                        }
                    }
                }
                accumulate(adj, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], var: Var, contribution: Tensor) {
    match &mut adj[var.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}
