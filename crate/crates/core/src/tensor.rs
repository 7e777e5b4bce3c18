//! Dense row-major matrices with a small reverse-mode differentiation tape.
//!
//! The op set is closed: everything the attention model needs is expressed
//! through the primitives on [`Tape`]. Values are always 64-bit.
//!
//! A forward pass pushes nodes onto a [`Tape`] and hands back [`Var`]
//! handles. Calling [`Tape::backward`] on a scalar node walks the tape in
//! exact reverse order and returns the accumulated [`Gradients`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("segment ids must be non-decreasing and below {num_segments}")]
    Segments { num_segments: usize },
    #[error("empty segment {0} in segment softmax")]
    EmptySegment(usize),
    #[error("backward requires a 1x1 loss, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = TensorError;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "from_vec",
                format!("{} values for a {rows}x{cols} tensor", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("from_rows", "ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column vector.
    pub fn column(values: Vec<f64>) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!(
                    "{}x{} * {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
    Exp,
    /// Natural log with inputs floored at [`LOG_FLOOR`]; the gradient is zero below the floor.
    Log,
    Softplus,
}

/// Inputs below this are clamped by [`Unary::Log`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    Reshape(Var),
    Unary(Var, Unary),
    Scale(Var, f64),
    Dropout(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    SegmentSoftmax {
        values: Var,
        segments: Vec<usize>,
        scale: Var,
    },
    SegmentWeightedSum {
        values: Var,
        weights: Var,
        segments: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` requires grad and the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Records primitive applications in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        // untracked results do not need their op kept around
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Transpose(a))
    }

    /// Elementwise sum of equal shapes, or `a` (n x c) plus a 1 x c row vector `b`
    /// broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let rg = self.any_grad(&[a, b]);
        if sa == sb {
            let mut value = self.value(a).clone();
            value.add_assign(self.value(b));
            Ok(self.push(value, rg, Op::Add(a, b)))
        } else if sb.0 == 1 && sb.1 == sa.1 {
            let mut value = self.value(a).clone();
            let bias = self.value(b).data().to_vec();
            for r in 0..sa.0 {
                for (v, b) in value.row_mut(r).iter_mut().zip(&bias) {
                    *v += b;
                }
            }
            Ok(self.push(value, rg, Op::AddRow(a, b)))
        } else {
            Err(shape_err(
                "add",
                format!("{}x{} + {}x{}", sa.0, sa.1, sb.0, sb.1),
            ))
        }
    }

    /// Horizontal concatenation (column blocks side by side).
    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("hcat of nothing".into()));
        }
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(shape_err("hcat", "row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::HCat(parts.to_vec())))
    }

    /// Vertical concatenation (row blocks stacked).
    pub fn vcat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("vcat of nothing".into()));
        }
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(shape_err("vcat", "column counts differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let rows = if cols == 0 {
            parts.iter().map(|&p| self.shape(p).0).sum()
        } else {
            rows
        };
        let value = Tensor { rows, cols, data };
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::VCat(parts.to_vec())))
    }

    /// Reinterpret the row-major data under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let src = self.value(a);
        if src.data.len() != rows * cols {
            return Err(shape_err(
                "reshape",
                format!("{}x{} -> {rows}x{cols}", src.rows, src.cols),
            ));
        }
        let value = Tensor {
            rows,
            cols,
            data: src.data.clone(),
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let x = self.value(a);
        let value = match kind {
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Relu => x.map(|v| v.max(0.0)),
            Unary::Exp => x.map(f64::exp),
            Unary::Log => x.map(|v| v.max(LOG_FLOOR).ln()),
            Unary::Softplus => x.map(softplus),
        };
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Unary(a, kind))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Scale(a, factor))
    }

    /// Inverted dropout: zero each entry with probability `p`, scale survivors by `1/(1-p)`.
    /// The mask is a pure function of `(p, seed, shape)`.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout probability {p}")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.data.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Op::Dropout(a, mask)))
    }

    /// Select rows of `a` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.rows) {
            return Err(shape_err(
                "gather_rows",
                format!("row {bad} of a {}-row tensor", x.rows),
            ));
        }
        let mut data = Vec::with_capacity(index.len() * x.cols);
        for &i in index {
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor {
            rows: index.len(),
            cols: x.cols,
            data,
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Op::Gather(a, index.to_vec())))
    }

    /// Softmax of `scale[seg] * values` within each run of equal segment ids.
    ///
    /// `values` is an E x 1 column and `segments` has one non-decreasing id per
    /// entry, each below `num_segments`. `scale` is either 1 x 1 (shared) or
    /// `num_segments` x 1.
    pub fn segment_softmax(
        &mut self,
        values: Var,
        segments: &[usize],
        num_segments: usize,
        scale: Var,
    ) -> Result<Var> {
        let x = self.value(values);
        if x.cols != 1 || x.rows != segments.len() {
            return Err(shape_err(
                "segment_softmax",
                format!("{}x{} values for {} segment ids", x.rows, x.cols, segments.len()),
            ));
        }
        check_segments(segments, num_segments)?;
        let s = self.value(scale);
        let shared = match s.shape() {
            (1, 1) => true,
            (n, 1) if n == num_segments => false,
            (r, c) => {
                return Err(shape_err(
                    "segment_softmax",
                    format!("scale is {r}x{c}, expected 1x1 or {num_segments}x1"),
                ))
            }
        };
        let mut out = vec![0.0; x.rows];
        for (seg, range) in segment_runs(segments) {
            let tau = if shared { s.data[0] } else { s.data[seg] };
            let max = range
                .clone()
                .map(|e| tau * x.data[e])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in range.clone() {
                let z = (tau * x.data[e] - max).exp();
                out[e] = z;
                total += z;
            }
            for e in range {
                out[e] /= total;
            }
        }
        let value = Tensor::column(out);
        let rg = self.any_grad(&[values, scale]);
        Ok(self.push(
            value,
            rg,
            Op::SegmentSoftmax {
                values,
                scale,
                segments: segments.to_vec(),
            },
        ))
    }

    /// `out[s] = sum over entries e with segments[e] == s of weights[e] * values[e]`.
    ///
    /// `values` is E x F, `weights` is E x 1; the result is `num_segments` x F,
    /// with zero rows for segments that have no entries.
    pub fn segment_weighted_sum(
        &mut self,
        values: Var,
        weights: Var,
        segments: &[usize],
        num_segments: usize,
    ) -> Result<Var> {
        let (v, w) = (self.value(values), self.value(weights));
        if v.rows != segments.len() || w.shape() != (segments.len(), 1) {
            return Err(shape_err(
                "segment_weighted_sum",
                format!(
                    "values {}x{}, weights {}x{}, {} segment ids",
                    v.rows,
                    v.cols,
                    w.rows,
                    w.cols,
                    segments.len()
                ),
            ));
        }
        check_segments(segments, num_segments)?;
        let mut out = Tensor::zeros(num_segments, v.cols);
        for (e, &seg) in segments.iter().enumerate() {
            let we = w.data[e];
            for (o, x) in out.row_mut(seg).iter_mut().zip(v.row(e)) {
                *o += we * x;
            }
        }
        let rg = self.any_grad(&[values, weights]);
        Ok(self.push(
            out,
            rg,
            Op::SegmentWeightedSum {
                values,
                weights,
                segments: segments.to_vec(),
            },
        ))
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Sum(a))
    }

    /// Reverse sweep from a 1x1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss(r, c));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // only leaves that asked for a gradient keep one
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = g.matmul(&bv.transpose()).expect("matmul shapes");
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = av.transpose().matmul(g).expect("matmul shapes");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut gb = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (acc, v) in gb.data.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *b, gb);
            }
            Op::HCat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.shape(p).1;
                    let mut gp = Tensor::zeros(g.rows, width);
                    for r in 0..g.rows {
                        gp.row_mut(r)
                            .copy_from_slice(&g.row(r)[offset..offset + width]);
                    }
                    offset += width;
                    self.accumulate(grads, p, gp);
                }
            }
            Op::VCat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let data = g.data[offset..offset + rows * cols].to_vec();
                    offset += rows * cols;
                    self.accumulate(grads, p, Tensor { rows, cols, data });
                }
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(*a);
                let ga = Tensor {
                    rows,
                    cols,
                    data: g.data.clone(),
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let y = &node.value;
                let local: Vec<f64> = match kind {
                    Unary::Sigmoid => y.data.iter().map(|s| s * (1.0 - s)).collect(),
                    Unary::Relu => x
                        .data
                        .iter()
                        .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                        .collect(),
                    Unary::Exp => y.data.clone(),
                    Unary::Log => x
                        .data
                        .iter()
                        .map(|&v| if v > LOG_FLOOR { 1.0 / v } else { 0.0 })
                        .collect(),
                    Unary::Softplus => x.data.iter().map(|&v| sigmoid(v)).collect(),
                };
                let ga = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&local).map(|(a, b)| a * b).collect(),
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::Dropout(a, mask) => {
                let ga = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(mask).map(|(a, m)| a * m).collect(),
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Gather(a, index) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (e, &i) in index.iter().enumerate() {
                    for (acc, v) in ga.row_mut(i).iter_mut().zip(g.row(e)) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SegmentSoftmax {
                values,
                segments,
                scale,
            } => {
                let x = self.value(*values);
                let s = self.value(*scale);
                let shared = s.data.len() == 1;
                let y = &node.value.data;
                let mut gx = vec![0.0; x.rows];
                let mut gs = Tensor::zeros(s.rows, 1);
                for (seg, range) in segment_runs(segments) {
                    let tau = if shared { s.data[0] } else { s.data[seg] };
                    let dot: f64 = range.clone().map(|e| g.data[e] * y[e]).sum();
                    let mut dtau = 0.0;
                    for e in range {
                        let d = y[e] * (g.data[e] - dot);
                        gx[e] = tau * d;
                        dtau += x.data[e] * d;
                    }
                    if shared {
                        gs.data[0] += dtau;
                    } else {
                        gs.data[seg] += dtau;
                    }
                }
                self.accumulate(grads, *values, Tensor::column(gx));
                self.accumulate(grads, *scale, gs);
            }
            Op::SegmentWeightedSum {
                values,
                weights,
                segments,
            } => {
                let (v, w) = (self.value(*values), self.value(*weights));
                if self.requires_grad(*values) {
                    let mut gv = Tensor::zeros(v.rows, v.cols);
                    for (e, &seg) in segments.iter().enumerate() {
                        let we = w.data[e];
                        for (acc, x) in gv.row_mut(e).iter_mut().zip(g.row(seg)) {
                            *acc = we * x;
                        }
                    }
                    self.accumulate(grads, *values, gv);
                }
                if self.requires_grad(*weights) {
                    let gw: Vec<f64> = segments
                        .iter()
                        .enumerate()
                        .map(|(e, &seg)| dot(v.row(e), g.row(seg)))
                        .collect();
                    self.accumulate(grads, *weights, Tensor::column(gw));
                }
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(rows, cols, g.data[0]));
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_segments(segments: &[usize], num_segments: usize) -> Result<()> {
    let sorted = segments.windows(2).all(|w| w[0] <= w[1]);
    let bounded = segments.last().is_none_or(|&s| s < num_segments);
    if sorted && bounded {
        Ok(())
    } else {
        Err(TensorError::Segments { num_segments })
    }
}

/// Maximal runs of equal ids in a sorted segment vector.
fn segment_runs(segments: &[usize]) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= segments.len() {
            return None;
        }
        let seg = segments[start];
        let mut end = start + 1;
        while end < segments.len() && segments[end] == seg {
            end += 1;
        }
        let run = (seg, start..end);
        start = end;
        Some(run)
    })
}

/// Compare analytic gradients of `f` against central differences.
///
/// `f` builds the scalar on a fresh tape from leaves registered for `params`
/// (in order) and returns the loss var. Returns the largest
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)` over all entries.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite(format!("loss = {v}")))
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(params[pi].rows, params[pi].cols);
        let analytic = grads.get(*var).unwrap_or(&zeros);
        if !analytic.is_finite() {
            return Err(TensorError::NonFinite(format!("gradient of parameter {pi}")));
        }
        for k in 0..params[pi].data.len() {
            let orig = probe[pi].data[k];
            probe[pi].data[k] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data[k] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn segment_softmax_closed_form() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::column(vec![1.0, 0.0]));
        let s = tape.constant(Tensor::scalar(2.0));
        let y = tape.segment_softmax(v, &[0, 0], 1, s).unwrap();
        let e2 = 2f64.exp();
        assert!(close(tape.value(y).data()[0], e2 / (e2 + 1.0), 1e-15));
        assert!(close(tape.value(y).data()[0], 0.8808, 1e-4));
        assert!(close(tape.value(y).data()[1], 0.1192, 1e-4));
    }

    #[test]
    fn singleton_segment_is_one() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::column(vec![-3.7, 5.0, 2.0]));
        let s = tape.constant(Tensor::scalar(1.0));
        let y = tape.segment_softmax(v, &[0, 1, 1], 2, s).unwrap();
        assert_eq!(tape.value(y).data()[0], 1.0);
    }

    #[test]
    fn unsorted_segments_rejected() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::column(vec![1.0, 2.0]));
        let s = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(
            tape.segment_softmax(v, &[1, 0], 2, s),
            Err(TensorError::Segments { .. })
        ));
    }

    #[test]
    fn matmul_value_and_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let y = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z).item(), 11.0);
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(y).is_none());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 3));
        let y = tape.constant(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(x, y), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(2, 3, 0.7));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::full(2, 3, 1.0));
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 2));
        let s = tape.sigmoid(x);
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert_eq!(
            tape.backward(x).unwrap_err(),
            TensorError::NonScalarLoss(2, 2)
        );
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x + x) -> grad 2
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(1, 3, 1.0));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn dropout_identity_and_determinism() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(4, 5, 1.0));
        let same = tape.dropout(x, 0.0, 3).unwrap();
        assert_eq!(same, x);
        let a = tape.dropout(x, 0.3, 11).unwrap();
        let b = tape.dropout(x, 0.3, 11).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        let kept = 1.0 / 0.7;
        assert!(tape
            .value(a)
            .data()
            .iter()
            .all(|&v| v == 0.0 || close(v, kept, 1e-12)));
        assert!(tape.dropout(x, 1.0, 1).is_err());
    }

    #[test]
    fn segment_weighted_sum_leaves_empty_segments_zero() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let w = tape.constant(Tensor::column(vec![0.5, 2.0]));
        let out = tape.segment_weighted_sum(v, w, &[0, 2], 3).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 1.0, 0.0, 0.0, 6.0, 8.0]);
    }

    #[test]
    fn grad_check_quadratic() {
        let w = Tensor::from_rows(&[vec![0.3], vec![-1.2], vec![2.5]]).unwrap();
        let err = grad_check(
            |t, p| {
                let wt = t.transpose(p[0]);
                t.matmul(wt, p[0])
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let w = Tensor::scalar(1.0);
        assert!(grad_check(|t, p| Ok(t.sum(p[0])), &[w], 0.0).is_err());
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [1e-3, 0.5, 1.0, 3.0, 40.0] {
            assert!(close(softplus(softplus_inverse(y)), y, 1e-12 * y.max(1.0)));
        }
    }
}
