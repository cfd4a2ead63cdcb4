//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive whose inputs include at least one
//! tape-attached tensor. Tensors that are not attached behave as constants:
//! operations on them are evaluated eagerly and nothing is recorded.
//! A tape is single-use; [`backward`] consumes it.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Argument floor applied by [`Tape::log`].
pub const LOG_CLAMP: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root is not attached to the tape")]
    DetachedRoot,
    #[error("tape has already been consumed by backward()")]
    TapeConsumed,
    #[error("tensor belongs to a different tape")]
    ForeignTensor,
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct NodeRef {
    tape: u64,
    index: usize,
}

/// Dense row-major tensor. Rank 0 (scalar), 1 and 2 are used in practice.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeRef>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::Invalid(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::Invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::Invalid("non-finite entry".into()));
        }
        Ok(Self {
            shape,
            data,
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            node: None,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
            node: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(AutodiffError::Invalid("no rows".into()));
        };
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(AutodiffError::Invalid("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => *self.shape.last().unwrap(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Copy of the value with no tape attachment.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf,
    MatMul,
    Add { row_broadcast: bool },
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Exp,
    Log,
    LogSoftmax,
    Sigmoid,
    Mean,
    Sum,
    ConcatRows,
    SliceRows { start: usize },
    Square,
    Sqrt,
    Transpose,
    Grl(f64),
    StraightThrough,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Option<usize>>,
    in_shapes: Vec<Vec<usize>>,
    saved: Vec<Vec<f64>>,
    out: Vec<f64>,
    shape: Vec<usize>,
}

/// Append-only record of primitives for one backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(AutodiffError::Shape { op, detail })
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.len() {
        2 => Ok((t.shape[0], t.shape[1])),
        _ => shape_err(op, format!("expected a matrix, got shape {:?}", t.shape)),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Attaches a copy of `t` as a leaf (e.g. a trainable parameter).
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            in_shapes: vec![],
            saved: vec![],
            out: vec![],
            shape: t.shape.clone(),
        });
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some(NodeRef {
                tape: self.id,
                index,
            }),
        }
    }

    fn input_index(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node {
            None => Ok(None),
            Some(r) if r.tape == self.id => Ok(Some(r.index)),
            Some(_) => Err(AutodiffError::ForeignTensor),
        }
    }

    fn record(
        &self,
        name: &'static str,
        op: Op,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        out: Vec<f64>,
    ) -> Result<Tensor> {
        check_finite(name, &out)?;
        let idx = inputs
            .iter()
            .map(|t| self.input_index(t))
            .collect::<Result<Vec<_>>>()?;
        if idx.iter().all(Option::is_none) {
            return Ok(Tensor {
                shape,
                data: out,
                node: None,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            op,
            inputs: idx,
            in_shapes: inputs.iter().map(|t| t.shape.clone()).collect(),
            saved: inputs.iter().map(|t| t.data.clone()).collect(),
            out: out.clone(),
            shape: shape.clone(),
        });
        Ok(Tensor {
            shape,
            data: out,
            node: Some(NodeRef {
                tape: self.id,
                index,
            }),
        })
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, k) = as_matrix("matmul", a)?;
        let (k2, m) = as_matrix("matmul", b)?;
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", a.shape, b.shape));
        }
        let out = matmul_raw(&a.data, &b.data, n, k, m);
        self.record("matmul", Op::MatMul, &[a, b], vec![n, m], out)
    }

    /// Elementwise sum. `b` may also be a length-`cols` vector (or `1 x cols`)
    /// added to every row of matrix `a`.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape == b.shape {
            let out = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
            return self.record(
                "add",
                Op::Add {
                    row_broadcast: false,
                },
                &[a, b],
                a.shape.clone(),
                out,
            );
        }
        let (n, m) = as_matrix("add", a)?;
        let bias_ok = b.shape == [m] || b.shape == [1, m];
        if !bias_ok {
            return shape_err("add", format!("{:?} + {:?}", a.shape, b.shape));
        }
        let mut out = a.data.clone();
        for r in 0..n {
            for (o, bv) in out[r * m..(r + 1) * m].iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.record(
            "add",
            Op::Add {
                row_broadcast: true,
            },
            &[a, b],
            a.shape.clone(),
            out,
        )
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return shape_err("sub", format!("{:?} - {:?}", a.shape, b.shape));
        }
        let out = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        self.record("sub", Op::Sub, &[a, b], a.shape.clone(), out)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return shape_err("mul", format!("{:?} * {:?}", a.shape, b.shape));
        }
        let out = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        self.record("mul", Op::Mul, &[a, b], a.shape.clone(), out)
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out = a.data.iter().map(|x| x * c).collect();
        self.record("scale", Op::Scale(c), &[a], a.shape.clone(), out)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let out = a
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        self.record("relu", Op::Relu, &[a], a.shape.clone(), out)
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.data.iter().map(|x| x.exp()).collect();
        self.record("exp", Op::Exp, &[a], a.shape.clone(), out)
    }

    /// Natural log of `max(x, LOG_CLAMP)`. Gradient is zero where the clamp is active.
    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.data.iter().map(|x| x.max(LOG_CLAMP).ln()).collect();
        self.record("log", Op::Log, &[a], a.shape.clone(), out)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape.is_empty() {
            return shape_err("log_softmax", "scalar input".into());
        }
        let c = a.cols();
        let mut out = a.data.clone();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.record("log_softmax", Op::LogSoftmax, &[a], a.shape.clone(), out)
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.data.iter().map(|&x| sigmoid(x)).collect();
        self.record("sigmoid", Op::Sigmoid, &[a], a.shape.clone(), out)
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        let v = a.data.iter().sum::<f64>() / a.data.len() as f64;
        self.record("mean", Op::Mean, &[a], vec![], vec![v])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let v = a.data.iter().sum::<f64>();
        self.record("sum", Op::Sum, &[a], vec![], vec![v])
    }

    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return shape_err("concat_rows", "no inputs".into());
        };
        let (_, m) = as_matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (n, m2) = as_matrix("concat_rows", p)?;
            if m2 != m {
                return shape_err("concat_rows", format!("width {m2} != {m}"));
            }
            rows += n;
            out.extend_from_slice(&p.data);
        }
        self.record("concat_rows", Op::ConcatRows, parts, vec![rows, m], out)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (n, m) = as_matrix("slice_rows", a)?;
        if start >= end || end > n {
            return shape_err("slice_rows", format!("range {start}..{end} of {n} rows"));
        }
        let out = a.data[start * m..end * m].to_vec();
        self.record(
            "slice_rows",
            Op::SliceRows { start },
            &[a],
            vec![end - start, m],
            out,
        )
    }

    pub fn square(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.data.iter().map(|x| x * x).collect();
        self.record("square", Op::Square, &[a], a.shape.clone(), out)
    }

    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        if a.data.iter().any(|&x| x < 0.0) {
            return Err(AutodiffError::NonFinite { op: "sqrt" });
        }
        let out = a.data.iter().map(|x| x.sqrt()).collect();
        self.record("sqrt", Op::Sqrt, &[a], a.shape.clone(), out)
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let (n, m) = as_matrix("transpose", a)?;
        let out = transpose_raw(&a.data, n, m);
        self.record("transpose", Op::Transpose, &[a], vec![m, n], out)
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda` backward.
    pub fn grl(&self, a: &Tensor, lambda: f64) -> Result<Tensor> {
        self.record(
            "grl",
            Op::Grl(lambda),
            &[a],
            a.shape.clone(),
            a.data.clone(),
        )
    }

    /// Forward value is `hard` exactly; backward routes the gradient to `soft`.
    pub fn straight_through(&self, soft: &Tensor, hard: &Tensor) -> Result<Tensor> {
        if soft.shape != hard.shape {
            return shape_err(
                "straight_through",
                format!("{:?} vs {:?}", soft.shape, hard.shape),
            );
        }
        if hard.is_attached() {
            return shape_err("straight_through", "hard values must be constants".into());
        }
        self.record(
            "straight_through",
            Op::StraightThrough,
            &[soft],
            soft.shape.clone(),
            hard.data.clone(),
        )
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// Gradients of a backward root with respect to tape nodes.
#[derive(Debug)]
pub struct GradMap {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl GradMap {
    /// Gradient for an attached tensor; zeros when the root does not depend on it.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let Some(r) = t.node else {
            return Err(AutodiffError::ForeignTensor);
        };
        if r.tape != self.tape || r.index >= self.grads.len() {
            return Err(AutodiffError::ForeignTensor);
        }
        let shape = self.shapes[r.index].clone();
        let data = match &self.grads[r.index] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Reverse sweep from a scalar root; marks the tape consumed.
pub fn backward(tape: &Tape, root: &Tensor) -> Result<GradMap> {
    if tape.consumed.get() {
        return Err(AutodiffError::TapeConsumed);
    }
    if !root.is_scalar() {
        return Err(AutodiffError::NonScalarRoot(root.shape.clone()));
    }
    let Some(r) = root.node else {
        return Err(AutodiffError::DetachedRoot);
    };
    if r.tape != tape.id {
        return Err(AutodiffError::ForeignTensor);
    }
    tape.consumed.set(true);
    let nodes = tape.nodes.borrow();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    grads[r.index] = Some(vec![1.0]);

    for i in (0..=r.index).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &nodes[i];
        let in_grads = node_backward(node, &g)?;
        for (slot, ig) in node.inputs.iter().zip(in_grads) {
            if let (Some(j), Some(ig)) = (slot, ig) {
                check_finite("backward", &ig)?;
                accumulate(&mut grads[*j], ig);
            }
        }
        grads[i] = Some(g);
    }
    Ok(GradMap {
        tape: tape.id,
        grads,
        shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
    })
}

fn node_backward(node: &Node, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
    let need = |k: usize| node.inputs[k].is_some();
    let x = &node.saved;
    let out = match node.op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let (n, k) = (node.in_shapes[0][0], node.in_shapes[0][1]);
            let m = node.in_shapes[1][1];
            let ga = need(0).then(|| {
                let bt = transpose_raw(&x[1], k, m);
                matmul_raw(g, &bt, n, m, k)
            });
            let gb = need(1).then(|| {
                let at = transpose_raw(&x[0], n, k);
                matmul_raw(&at, g, k, n, m)
            });
            vec![ga, gb]
        }
        Op::Add { row_broadcast } => {
            let gb = need(1).then(|| {
                if row_broadcast {
                    let m = node.in_shapes[1].iter().product::<usize>();
                    let mut acc = vec![0.0; m];
                    for row in g.chunks(m) {
                        acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    acc
                } else {
                    g.to_vec()
                }
            });
            vec![need(0).then(|| g.to_vec()), gb]
        }
        Op::Sub => vec![
            need(0).then(|| g.to_vec()),
            need(1).then(|| g.iter().map(|v| -v).collect()),
        ],
        Op::Mul => vec![
            need(0).then(|| g.iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
            need(1).then(|| g.iter().zip(&x[0]).map(|(a, b)| a * b).collect()),
        ],
        Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Op::Relu => vec![Some(
            g.iter()
                .zip(&x[0])
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                .collect(),
        )],
        Op::Exp => vec![Some(g.iter().zip(&node.out).map(|(a, b)| a * b).collect())],
        Op::Log => vec![Some(
            g.iter()
                .zip(&x[0])
                .map(|(gv, &xv)| if xv > LOG_CLAMP { gv / xv } else { 0.0 })
                .collect(),
        )],
        Op::LogSoftmax => {
            let c = *node.shape.last().unwrap();
            let mut gi = vec![0.0; g.len()];
            for ((grow, orow), irow) in g.chunks(c).zip(node.out.chunks(c)).zip(gi.chunks_mut(c)) {
                let s: f64 = grow.iter().sum();
                for ((iv, gv), ov) in irow.iter_mut().zip(grow).zip(orow) {
                    *iv = gv - ov.exp() * s;
                }
            }
            vec![Some(gi)]
        }
        Op::Sigmoid => vec![Some(
            g.iter()
                .zip(&node.out)
                .map(|(gv, s)| gv * s * (1.0 - s))
                .collect(),
        )],
        Op::Mean => {
            let n = x[0].len();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Op::Sum => vec![Some(vec![g[0]; x[0].len()])],
        Op::ConcatRows => {
            let mut off = 0;
            x.iter()
                .enumerate()
                .map(|(k, part)| {
                    let len = part.len();
                    let r = need(k).then(|| g[off..off + len].to_vec());
                    off += len;
                    r
                })
                .collect()
        }
        Op::SliceRows { start } => {
            let m = node.in_shapes[0][1];
            let mut gi = vec![0.0; x[0].len()];
            gi[start * m..start * m + g.len()].copy_from_slice(g);
            vec![Some(gi)]
        }
        Op::Square => vec![Some(
            g.iter().zip(&x[0]).map(|(gv, xv)| 2.0 * gv * xv).collect(),
        )],
        Op::Sqrt => vec![Some(
            g.iter()
                .zip(&node.out)
                .map(|(gv, s)| if *s > 0.0 { gv / (2.0 * s) } else { 0.0 })
                .collect(),
        )],
        Op::Transpose => {
            let (n, m) = (node.in_shapes[0][0], node.in_shapes[0][1]);
            vec![Some(transpose_raw(g, m, n))]
        }
        Op::Grl(lambda) => vec![Some(g.iter().map(|v| -lambda * v).collect())],
        Op::StraightThrough => vec![Some(g.to_vec())],
    };
    Ok(out)
}

/// Maximum relative error between the reverse-mode gradient of `f` at `x`
/// and central differences with step `eps`.
///
/// The denominator per coordinate is `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(AutodiffError::Invalid(format!(
            "eps {eps} outside (0, 1e-3]"
        )));
    }
    let tape = Tape::new();
    let xl = tape.leaf(x);
    let y = f(&tape, &xl)?;
    if !y.is_scalar() {
        return Err(AutodiffError::NonScalarRoot(y.shape.clone()));
    }
    let analytic = if y.is_attached() {
        backward(&tape, &y)?.wrt(&xl)?
    } else {
        Tensor::zeros(&x.shape)
    };

    let mut worst = 0.0f64;
    let mut probe = x.detach();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let fp = f(&Tape::new(), &probe)?.item();
        probe.data[i] = orig - eps;
        let fm = f(&Tape::new(), &probe)?.item();
        probe.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Row-gather via a constant one-hot matrix.
pub fn gather_rows(tape: &Tape, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (n, _) = as_matrix("gather_rows", x)?;
    if idx.is_empty() {
        return shape_err("gather_rows", "empty index list".into());
    }
    if idx.iter().any(|&i| i >= n) {
        return shape_err("gather_rows", format!("index out of range for {n} rows"));
    }
    let mut sel = vec![0.0; idx.len() * n];
    for (r, &i) in idx.iter().enumerate() {
        sel[r * n + i] = 1.0;
    }
    let sel = Tensor {
        shape: vec![idx.len(), n],
        data: sel,
        node: None,
    };
    tape.matmul(&sel, x)
}

/// Per-row sums of a matrix, as a column.
pub fn row_sums(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let (_, m) = as_matrix("row_sums", x)?;
    tape.matmul(x, &Tensor::full(&[m, 1], 1.0))
}

/// Column `j` of a matrix, as a column.
pub fn column(tape: &Tape, x: &Tensor, j: usize) -> Result<Tensor> {
    let (_, m) = as_matrix("column", x)?;
    if j >= m {
        return shape_err("column", format!("column {j} of {m}"));
    }
    let mut e = vec![0.0; m];
    e[j] = 1.0;
    tape.matmul(
        x,
        &Tensor {
            shape: vec![m, 1],
            data: e,
            node: None,
        },
    )
}

/// Reciprocal of a positive scalar, composed as `exp(-log(x))`.
pub fn recip(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let l = tape.log(x)?;
    let nl = tape.scale(&l, -1.0)?;
    tape.exp(&nl)
}

/// Set of node ids reachable backwards from a tensor. Test helper for
/// asserting that a constant never entered the tape.
pub fn ancestors(tape: &Tape, t: &Tensor) -> HashSet<usize> {
    let mut seen = HashSet::new();
    let Some(r) = t.node else { return seen };
    if r.tape != tape.id {
        return seen;
    }
    let nodes = tape.nodes.borrow();
    let mut stack = vec![r.index];
    while let Some(i) = stack.pop() {
        if seen.insert(i) {
            stack.extend(nodes[i].inputs.iter().flatten().copied());
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn relu_forward() {
        let t = Tape::new();
        let y = t
            .relu(&Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_softmax_symmetric() {
        let t = Tape::new();
        let y = t
            .log_softmax(&Tensor::vector(vec![0.0, 0.0]).unwrap())
            .unwrap();
        let l = -(2f64.ln());
        assert!((y.data()[0] - l).abs() < 1e-15 && (y.data()[1] - l).abs() < 1e-15);
    }

    #[test]
    fn matmul_small() {
        let t = Tape::new();
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(t.matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn square_grad() {
        let t = Tape::new();
        let x = t.leaf(&Tensor::scalar(3.0));
        let y = t.square(&x).unwrap();
        let g = backward(&t, &y).unwrap();
        assert_eq!(g.wrt(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn mean_grad() {
        let t = Tape::new();
        let x = t.leaf(&Tensor::vector(vec![1.0, 5.0]).unwrap());
        let y = t.mean(&x).unwrap();
        assert_eq!(
            backward(&t, &y).unwrap().wrt(&x).unwrap().data(),
            &[0.5, 0.5]
        );
    }

    #[test]
    fn relu_kink_grad_is_zero() {
        let t = Tape::new();
        let x = t.leaf(&Tensor::scalar(0.0));
        let y = t.relu(&x).unwrap();
        assert_eq!(backward(&t, &y).unwrap().wrt(&x).unwrap().item(), 0.0);
    }

    #[test]
    fn backward_errors() {
        let t = Tape::new();
        let x = t.leaf(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = t.square(&x).unwrap();
        assert!(matches!(
            backward(&t, &y),
            Err(AutodiffError::NonScalarRoot(_))
        ));
        let s = t.sum(&y).unwrap();
        backward(&t, &s).unwrap();
        assert_eq!(backward(&t, &s).unwrap_err(), AutodiffError::TapeConsumed);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let t = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            t.matmul(&a, &b),
            Err(AutodiffError::Shape { op: "matmul", .. })
        ));
        assert!(matches!(
            t.mul(&a, &Tensor::zeros(&[3])),
            Err(AutodiffError::Shape { .. })
        ));
    }

    #[test]
    fn non_finite_names_primitive() {
        let t = Tape::new();
        let x = Tensor::scalar(1000.0);
        assert_eq!(
            t.exp(&x).unwrap_err(),
            AutodiffError::NonFinite { op: "exp" }
        );
    }

    #[test]
    fn unreachable_nodes_get_zero() {
        let t = Tape::new();
        let x = t.leaf(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let z = t.leaf(&Tensor::vector(vec![3.0, 4.0]).unwrap());
        let _unused = t.exp(&z).unwrap();
        let y = t.sum(&x).unwrap();
        let g = backward(&t, &y).unwrap();
        assert_eq!(g.wrt(&z).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn grl_forward_identity_and_reversed_grad() {
        let t = Tape::new();
        let x = t.leaf(&Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
        let y = t.grl(&x, 1.0).unwrap();
        assert_eq!(y.data(), x.data());
        let s = t.sum(&y).unwrap();
        assert_eq!(
            backward(&t, &s).unwrap().wrt(&x).unwrap().data(),
            &[-1.0; 3]
        );
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let t = Tape::new();
        let soft = t.leaf(&Tensor::vector(vec![0.7, 0.1]).unwrap());
        let hard = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let st = t.straight_through(&soft, &hard).unwrap();
        assert_eq!(st.data(), &[1.0, 0.0]);
        let w = Tensor::vector(vec![2.0, 3.0]).unwrap();
        let l = t.sum(&t.mul(&st, &w).unwrap()).unwrap();
        assert_eq!(
            backward(&t, &l).unwrap().wrt(&soft).unwrap().data(),
            &[2.0, 3.0]
        );
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[8]);
        let err = grad_check(|t, x| t.sum(&t.square(x)?), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn grad_check_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_tensor(&mut rng, &[3, 5]);
        let target = rand_tensor(&mut rng, &[3, 5]);
        let err = grad_check(
            |t, z| {
                let ls = t.log_softmax(z)?;
                t.scale(&t.sum(&t.mul(&ls, &target)?)?, -1.0)
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn grad_check_constant_is_zero() {
        let x = Tensor::vector(vec![0.3, -0.2]).unwrap();
        let err = grad_check(|_, _| Ok(Tensor::scalar(2.5)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, x| t.square(x), &x, 1e-2).is_err());
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(&mut rng, &[4, 3]);
        let w0 = rand_tensor(&mut rng, &[3, 2]);
        let (a, b) = (0.7, -1.3);
        let l1 = |t: &Tape, x: &Tensor, w: &Tensor| t.sum(&t.square(&t.matmul(x, w)?)?);
        let l2 =
            |t: &Tape, x: &Tensor, w: &Tensor| t.mean(&t.exp(&t.scale(&t.matmul(x, w)?, 0.3)?)?);

        let grads = |which: u8| {
            let t = Tape::new();
            let x = t.leaf(&x0);
            let w = t.leaf(&w0);
            let root = match which {
                1 => l1(&t, &x, &w).unwrap(),
                2 => l2(&t, &x, &w).unwrap(),
                _ => {
                    let p = t.scale(&l1(&t, &x, &w).unwrap(), a).unwrap();
                    let q = t.scale(&l2(&t, &x, &w).unwrap(), b).unwrap();
                    t.add(&p, &q).unwrap()
                }
            };
            let g = backward(&t, &root).unwrap();
            (g.wrt(&x).unwrap(), g.wrt(&w).unwrap())
        };
        let (gx1, gw1) = grads(1);
        let (gx2, gw2) = grads(2);
        let (gx, gw) = grads(3);
        for ((c, p), q) in gx.data().iter().zip(gx1.data()).zip(gx2.data()) {
            assert!((c - (a * p + b * q)).abs() < 1e-12);
        }
        for ((c, p), q) in gw.data().iter().zip(gw1.data()).zip(gw2.data()) {
            assert!((c - (a * p + b * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_are_not_recorded() {
        let t = Tape::new();
        let a = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let y = t.exp(&a).unwrap();
        assert!(!y.is_attached());
        assert!(t.is_empty());
    }

    #[test]
    fn foreign_tensor_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.leaf(&Tensor::scalar(1.0));
        assert_eq!(t2.exp(&x).unwrap_err(), AutodiffError::ForeignTensor);
    }
}
