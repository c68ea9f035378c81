//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit and row-major. A [`Tensor`] is an immutable value;
//! when any operand carries a trace node the result records the operation,
//! and [`backward`] replays the graph in reverse creation order to
//! accumulate gradients into leaf nodes. Tensors built from plain data are
//! constants: they never allocate gradient storage and ops on constants
//! alone record nothing, which is the no-grad inference path.

mod rng;

pub mod optim;

pub use optim::{AdamW, Parameter};
pub use rng::RngStream;

use std::cell::RefCell;
use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_NODE_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_NODE_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// A node in the backward graph. Holds the gradient slot for one tensor and
/// enough saved state to push gradients to its parents.
pub struct Node {
    id: u64,
    size: usize,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

impl Node {
    fn accumulate(&self, src: &[f64]) {
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, si) in g.iter_mut().zip(src) {
                    *gi += si;
                }
            }
            None => *slot = Some(src.to_vec()),
        }
    }
}

enum Op {
    Leaf,
    Matmul { a: Tensor, b: Tensor },
    Add { a: Tensor, b: Tensor },
    AddRow { x: Tensor, row: Tensor },
    Scale { x: Tensor, c: f64 },
    Gelu { x: Tensor },
    LayerNorm { x: Tensor, stats: Vec<(f64, f64)> },
    MaskedSoftmax { x: Tensor, allowed: Vec<usize>, out: Vec<f64> },
    SoftmaxXent { logits: Tensor, targets: Vec<usize>, probs: Vec<f64> },
    GatherRows { table: Tensor, ids: Vec<usize> },
    ConcatRows { parts: Vec<Tensor> },
    ConcatCols { parts: Vec<Tensor> },
    SliceRows { x: Tensor, start: usize },
    SliceCols { x: Tensor, start: usize },
    SumAll { x: Tensor },
    MeanRows { x: Tensor },
    Transpose { x: Tensor },
    Reshape { x: Tensor },
}

/// Immutable 2-D array of f64 with an optional backward-trace node.
#[derive(Clone)]
pub struct Tensor {
    data: Rc<Vec<f64>>,
    rows: usize,
    cols: usize,
    node: Option<Rc<Node>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("traced", &self.node.is_some())
            .finish()
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl Tensor {
    /// Constant tensor (no trace). Errors if data length does not match.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { data: Rc::new(data), rows, cols, node: None })
    }

    /// Traced leaf. Gradients accumulate here; used by [`Parameter`].
    pub fn leaf(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        let mut t = Tensor::new(rows, cols, data)?;
        t.node = Some(Rc::new(Node {
            id: fresh_id(),
            size: t.rows * t.cols,
            grad: RefCell::new(None),
            op: Op::Leaf,
        }));
        Ok(t)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, vec![0.0; rows * cols]).expect("positive dims")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(1, 1, vec![v]).expect("1x1")
    }

    /// I.i.d. normal draws with standard deviation `std` (constant tensor).
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        Tensor::new(rows, cols, data).expect("positive dims")
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

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are always positive
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn is_traced(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    /// Same values, no trace. Gradients stop here.
    pub fn detach(&self) -> Tensor {
        Tensor { data: Rc::clone(&self.data), rows: self.rows, cols: self.cols, node: None }
    }

    /// Accumulated gradient of a traced tensor, zeros if backward never
    /// reached it, `None` if untraced.
    pub fn grad(&self) -> Option<Vec<f64>> {
        let node = self.node.as_ref()?;
        Some(node.grad.borrow().clone().unwrap_or_else(|| vec![0.0; node.size]))
    }

    pub fn zero_grad(&self) {
        if let Some(node) = &self.node {
            *node.grad.borrow_mut() = None;
        }
    }

    pub(crate) fn data_rc_mut(&mut self) -> &mut Rc<Vec<f64>> {
        &mut self.data
    }

    fn wrap(&self, rows: usize, cols: usize, data: Vec<f64>, op: Op, traced: bool) -> Tensor {
        let node = traced.then(|| {
            Rc::new(Node { id: fresh_id(), size: rows * cols, grad: RefCell::new(None), op })
        });
        Tensor { data: Rc::new(data), rows, cols, node }
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Matrix product `self[m×k] · b[k×n]`.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        if self.cols != b.rows {
            return Err(shape_err("matmul", self.shape(), b.shape()));
        }
        let out = matmul_raw(&self.data, &b.data, self.rows, self.cols, b.cols);
        let traced = self.node.is_some() || b.node.is_some();
        Ok(self.wrap(self.rows, b.cols, out, Op::Matmul { a: self.clone(), b: b.clone() }, traced))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&self, b: &Tensor) -> Result<Tensor> {
        if self.shape() != b.shape() {
            return Err(shape_err("add", self.shape(), b.shape()));
        }
        let out = self.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
        let traced = self.node.is_some() || b.node.is_some();
        Ok(self.wrap(self.rows, self.cols, out, Op::Add { a: self.clone(), b: b.clone() }, traced))
    }

    /// Adds a `1×d` row to every row of a `T×d` tensor.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(shape_err("add_row", self.shape(), row.shape()));
        }
        let mut out = Vec::with_capacity(self.len());
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.data[r * self.cols + c] + row.data[c]);
            }
        }
        let traced = self.node.is_some() || row.node.is_some();
        Ok(self.wrap(self.rows, self.cols, out, Op::AddRow { x: self.clone(), row: row.clone() }, traced))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data.iter().map(|x| x * c).collect();
        let traced = self.node.is_some();
        self.wrap(self.rows, self.cols, out, Op::Scale { x: self.clone(), c }, traced)
    }

    /// Elementwise GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(sqrt(2/pi)·(x + 0.044715·x^3)))`.
    pub fn gelu(&self) -> Tensor {
        let out = self.data.iter().map(|&x| gelu_scalar(x)).collect();
        let traced = self.node.is_some();
        self.wrap(self.rows, self.cols, out, Op::Gelu { x: self.clone() }, traced)
    }

    /// Row-wise layer normalization without learned affine:
    /// every row is centered and scaled to unit variance under `eps`.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        if self.cols == 0 {
            return Err(Error::Shape("layer_norm on zero-width tensor".into()));
        }
        let d = self.cols as f64;
        let mut out = vec![0.0; self.len()];
        let mut stats = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, rstd));
            for c in 0..self.cols {
                out[r * self.cols + c] = (row[c] - mean) * rstd;
            }
        }
        let traced = self.node.is_some();
        Ok(self.wrap(self.rows, self.cols, out, Op::LayerNorm { x: self.clone(), stats }, traced))
    }

    /// Row-wise softmax over a leading prefix of each row: row `i` is
    /// normalized over its first `allowed[i]` columns, the rest are zero.
    /// Full softmax is `allowed[i] == cols` everywhere.
    pub fn masked_softmax(&self, allowed: &[usize]) -> Result<Tensor> {
        if allowed.len() != self.rows {
            return Err(Error::Argument(format!(
                "masked_softmax: {} allowed lengths for {} rows",
                allowed.len(),
                self.rows
            )));
        }
        if let Some(&bad) = allowed.iter().find(|&&a| a == 0 || a > self.cols) {
            return Err(Error::Argument(format!(
                "masked_softmax: allowed length {bad} outside 1..={}",
                self.cols
            )));
        }
        let mut out = vec![0.0; self.len()];
        for r in 0..self.rows {
            let n = allowed[r];
            let row = &self.data[r * self.cols..r * self.cols + n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                out[r * self.cols + c] = e;
                z += e;
            }
            for c in 0..n {
                out[r * self.cols + c] /= z;
            }
        }
        let traced = self.node.is_some();
        let op = Op::MaskedSoftmax { x: self.clone(), allowed: allowed.to_vec(), out: out.clone() };
        Ok(self.wrap(self.rows, self.cols, out, op, traced))
    }

    /// Mean over the `n` rows of the negative log-softmax probability of each
    /// row's target class. Returns a scalar.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        if targets.len() != self.rows {
            return Err(Error::Argument(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                self.rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.cols) {
            return Err(Error::Index(format!("target {bad} out of range 0..{}", self.cols)));
        }
        let mut probs = vec![0.0; self.len()];
        let mut loss = 0.0;
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * self.cols + c] = e;
                z += e;
            }
            for c in 0..self.cols {
                probs[r * self.cols + c] /= z;
            }
            loss -= probs[r * self.cols + targets[r]].ln();
        }
        loss /= self.rows as f64;
        let traced = self.node.is_some();
        let op = Op::SoftmaxXent { logits: self.clone(), targets: targets.to_vec(), probs };
        Ok(self.wrap(1, 1, vec![loss], op, traced))
    }

    /// Rows of `self` selected by token id: `table[V×d]`, ids in `[0, V)`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Argument("gather_rows: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.rows) {
            return Err(Error::Index(format!("row id {bad} out of range 0..{}", self.rows)));
        }
        let mut out = Vec::with_capacity(ids.len() * self.cols);
        for &i in ids {
            out.extend_from_slice(&self.data[i * self.cols..(i + 1) * self.cols]);
        }
        let traced = self.node.is_some();
        Ok(self.wrap(ids.len(), self.cols, out, Op::GatherRows { table: self.clone(), ids: ids.to_vec() }, traced))
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Argument("concat_rows: no parts".into()))?;
        let cols = first.cols;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.cols != cols {
                return Err(shape_err("concat_rows", (rows, cols), p.shape()));
            }
            rows += p.rows;
            out.extend_from_slice(&p.data);
        }
        let traced = parts.iter().any(|p| p.node.is_some());
        Ok(first.wrap(rows, cols, out, Op::ConcatRows { parts: parts.to_vec() }, traced))
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Argument("concat_cols: no parts".into()))?;
        let rows = first.rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = vec![0.0; rows * cols];
        let mut offset = 0;
        for p in parts {
            if p.rows != rows {
                return Err(shape_err("concat_cols", (rows, offset), p.shape()));
            }
            for r in 0..rows {
                out[r * cols + offset..r * cols + offset + p.cols]
                    .copy_from_slice(&p.data[r * p.cols..(r + 1) * p.cols]);
            }
            offset += p.cols;
        }
        let traced = parts.iter().any(|p| p.node.is_some());
        Ok(first.wrap(rows, cols, out, Op::ConcatCols { parts: parts.to_vec() }, traced))
    }

    /// Contiguous row slice `[start, start+len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if len == 0 || start + len > self.rows {
            return Err(Error::Argument(format!(
                "slice_rows [{start}, {}) of {} rows",
                start + len,
                self.rows
            )));
        }
        let out = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        let traced = self.node.is_some();
        Ok(self.wrap(len, self.cols, out, Op::SliceRows { x: self.clone(), start }, traced))
    }

    /// Contiguous column slice `[start, start+len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        if len == 0 || start + len > self.cols {
            return Err(Error::Argument(format!(
                "slice_cols [{start}, {}) of {} cols",
                start + len,
                self.cols
            )));
        }
        let mut out = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            out.extend_from_slice(&self.data[r * self.cols + start..r * self.cols + start + len]);
        }
        let traced = self.node.is_some();
        Ok(self.wrap(self.rows, len, out, Op::SliceCols { x: self.clone(), start }, traced))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let s = self.data.iter().sum();
        let traced = self.node.is_some();
        self.wrap(1, 1, vec![s], Op::SumAll { x: self.clone() }, traced)
    }

    /// Column means: `T×d -> 1×d`.
    pub fn mean_rows(&self) -> Tensor {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c] += self.data[r * self.cols + c];
            }
        }
        let inv = 1.0 / self.rows as f64;
        for v in &mut out {
            *v *= inv;
        }
        let traced = self.node.is_some();
        self.wrap(1, self.cols, out, Op::MeanRows { x: self.clone() }, traced)
    }

    pub fn transpose(&self) -> Tensor {
        let out = transpose_raw(&self.data, self.rows, self.cols);
        let traced = self.node.is_some();
        self.wrap(self.cols, self.rows, out, Op::Transpose { x: self.clone() }, traced)
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.len() || rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "reshape {}x{} -> {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        let traced = self.node.is_some();
        Ok(self.wrap(rows, cols, self.data.as_ref().clone(), Op::Reshape { x: self.clone() }, traced))
    }

    /// Per-row argmax (first max wins).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// I.i.d. Gaussian tensor with standard deviation `sigma`; `sigma == 0`
/// yields exact zeros. Never traced.
pub fn gaussian(rows: usize, cols: usize, sigma: f64, rng: &mut RngStream) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::Argument(format!("gaussian: negative sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Tensor::zeros(rows, cols));
    }
    Ok(Tensor::randn(rows, cols, sigma, rng))
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// In-flight gradients keyed by node id. Only leaf nodes retain their
/// gradient after the pass; everything else lives here and is freed as soon
/// as it has been propagated.
struct GradSink {
    map: HashMap<u64, Vec<f64>>,
}

impl GradSink {
    fn add(&mut self, t: &Tensor, grad: &[f64]) {
        if let Some(node) = &t.node {
            match self.map.get_mut(&node.id) {
                Some(g) => {
                    for (gi, si) in g.iter_mut().zip(grad) {
                        *gi += si;
                    }
                }
                None => {
                    self.map.insert(node.id, grad.to_vec());
                }
            }
        }
    }

    fn add_owned(&mut self, t: &Tensor, grad: Vec<f64>) {
        if let Some(node) = &t.node {
            match self.map.get_mut(&node.id) {
                Some(g) => {
                    for (gi, si) in g.iter_mut().zip(&grad) {
                        *gi += si;
                    }
                }
                None => {
                    self.map.insert(node.id, grad);
                }
            }
        }
    }
}

/// Runs reverse-mode accumulation from a scalar loss. Gradients add into the
/// traced leaves touched by the graph; repeated calls without zeroing
/// accumulate further.
pub fn backward(loss: &Tensor) -> Result<()> {
    let root = loss
        .node
        .as_ref()
        .ok_or_else(|| Error::State("backward on untraced tensor".into()))?;
    if loss.len() != 1 {
        return Err(Error::Argument(format!(
            "backward needs a scalar loss, got {}x{}",
            loss.rows, loss.cols
        )));
    }

    // Nodes are created in topological order, so decreasing id is a valid
    // reverse-topological order.
    let mut reachable: HashMap<u64, Rc<Node>> = HashMap::new();
    let mut stack = vec![Rc::clone(root)];
    while let Some(n) = stack.pop() {
        if reachable.contains_key(&n.id) {
            continue;
        }
        for parent in parents_of(&n.op) {
            if let Some(pn) = &parent.node {
                if !reachable.contains_key(&pn.id) {
                    stack.push(Rc::clone(pn));
                }
            }
        }
        reachable.insert(n.id, n);
    }
    let mut order: Vec<Rc<Node>> = reachable.into_values().collect();
    order.sort_by(|a, b| b.id.cmp(&a.id));

    let mut sink = GradSink { map: HashMap::new() };
    sink.map.insert(root.id, vec![1.0]);
    for node in order {
        let Some(grad) = sink.map.remove(&node.id) else { continue };
        if matches!(node.op, Op::Leaf) {
            node.accumulate(&grad);
        } else {
            backward_one(&node.op, &grad, &mut sink);
        }
    }
    Ok(())
}

fn parents_of(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul { a, b } | Op::Add { a, b } => vec![a, b],
        Op::AddRow { x, row } => vec![x, row],
        Op::Scale { x, .. }
        | Op::Gelu { x }
        | Op::LayerNorm { x, .. }
        | Op::MaskedSoftmax { x, .. }
        | Op::SliceRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::SumAll { x }
        | Op::MeanRows { x }
        | Op::Transpose { x }
        | Op::Reshape { x } => vec![x],
        Op::SoftmaxXent { logits, .. } => vec![logits],
        Op::GatherRows { table, .. } => vec![table],
        Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.iter().collect(),
    }
}

fn backward_one(op: &Op, g: &[f64], sink: &mut GradSink) {
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = a.shape();
            let n = b.cols;
            if a.node.is_some() {
                // dA = g · Bᵀ
                let bt = transpose_raw(&b.data, b.rows, b.cols);
                sink.add_owned(a, matmul_raw(g, &bt, m, n, k));
            }
            if b.node.is_some() {
                // dB = Aᵀ · g
                let at = transpose_raw(&a.data, a.rows, a.cols);
                sink.add_owned(b, matmul_raw(&at, g, k, m, n));
            }
        }
        Op::Add { a, b } => {
            sink.add(a, g);
            sink.add(b, g);
        }
        Op::AddRow { x, row } => {
            sink.add(x, g);
            if row.node.is_some() {
                let mut rg = vec![0.0; row.cols];
                for r in 0..x.rows {
                    for c in 0..x.cols {
                        rg[c] += g[r * x.cols + c];
                    }
                }
                sink.add_owned(row, rg);
            }
        }
        Op::Scale { x, c } => {
            sink.add_owned(x, g.iter().map(|v| v * c).collect());
        }
        Op::Gelu { x } => {
            let gx = x.data.iter().zip(g).map(|(&xv, gv)| gv * gelu_grad_scalar(xv)).collect();
            sink.add_owned(x, gx);
        }
        Op::LayerNorm { x, stats } => {
            let d = x.cols;
            let inv_d = 1.0 / d as f64;
            let mut gx = vec![0.0; x.len()];
            for r in 0..x.rows {
                let (mean, rstd) = stats[r];
                let xr = &x.data[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut g_mean = 0.0;
                let mut gy_mean = 0.0;
                for c in 0..d {
                    let y = (xr[c] - mean) * rstd;
                    g_mean += gr[c];
                    gy_mean += gr[c] * y;
                }
                g_mean *= inv_d;
                gy_mean *= inv_d;
                for c in 0..d {
                    let y = (xr[c] - mean) * rstd;
                    gx[r * d + c] = rstd * (gr[c] - g_mean - y * gy_mean);
                }
            }
            sink.add_owned(x, gx);
        }
        Op::MaskedSoftmax { x, allowed, out } => {
            let cols = x.cols;
            let mut gx = vec![0.0; x.len()];
            for r in 0..x.rows {
                let n = allowed[r];
                let yr = &out[r * cols..r * cols + n];
                let gr = &g[r * cols..r * cols + n];
                let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                for c in 0..n {
                    gx[r * cols + c] = yr[c] * (gr[c] - dot);
                }
            }
            sink.add_owned(x, gx);
        }
        Op::SoftmaxXent { logits, targets, probs } => {
            let scale = g[0] / logits.rows as f64;
            let mut gx = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                gx[r * logits.cols + t] -= 1.0;
            }
            for v in &mut gx {
                *v *= scale;
            }
            sink.add_owned(logits, gx);
        }
        Op::GatherRows { table, ids } => {
            if table.node.is_some() {
                let mut gt = vec![0.0; table.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..table.cols {
                        gt[id * table.cols + c] += g[r * table.cols + c];
                    }
                }
                sink.add_owned(table, gt);
            }
        }
        Op::ConcatRows { parts } => {
            let cols = parts[0].cols;
            let mut offset = 0;
            for p in parts {
                sink.add(p, &g[offset..offset + p.rows * cols]);
                offset += p.rows * cols;
            }
        }
        Op::ConcatCols { parts } => {
            let rows = parts[0].rows;
            let total: usize = parts.iter().map(|p| p.cols).sum();
            let mut offset = 0;
            for p in parts {
                if p.node.is_some() {
                    let mut gp = vec![0.0; rows * p.cols];
                    for r in 0..rows {
                        gp[r * p.cols..(r + 1) * p.cols]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + p.cols]);
                    }
                    sink.add_owned(p, gp);
                }
                offset += p.cols;
            }
        }
        Op::SliceRows { x, start } => {
            let cols = x.cols;
            let out_rows = g.len() / cols;
            let mut gx = vec![0.0; x.len()];
            gx[start * cols..(start + out_rows) * cols].copy_from_slice(g);
            sink.add_owned(x, gx);
        }
        Op::SliceCols { x, start } => {
            let out_cols = g.len() / x.rows;
            let mut gx = vec![0.0; x.len()];
            for r in 0..x.rows {
                gx[r * x.cols + start..r * x.cols + start + out_cols]
                    .copy_from_slice(&g[r * out_cols..(r + 1) * out_cols]);
            }
            sink.add_owned(x, gx);
        }
        Op::SumAll { x } => {
            sink.add_owned(x, vec![g[0]; x.len()]);
        }
        Op::MeanRows { x } => {
            let inv = 1.0 / x.rows as f64;
            let mut gx = vec![0.0; x.len()];
            for r in 0..x.rows {
                for c in 0..x.cols {
                    gx[r * x.cols + c] = g[c] * inv;
                }
            }
            sink.add_owned(x, gx);
        }
        Op::Transpose { x } => {
            sink.add_owned(x, transpose_raw(g, x.cols, x.rows));
        }
        Op::Reshape { x } => {
            sink.add(x, g);
        }
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite-difference oracle, independent of the backward pass.

    pub const STEP: f64 = 1e-5;

    /// Checks d(loss)/d(leaf) against central differences for every
    /// coordinate of `leaf_data`. `f` must rebuild the forward pass from the
    /// supplied values and return the scalar loss value.
    pub fn check<F>(leaf_data: &[f64], analytic: &[f64], mut f: F, tol: f64)
    where
        F: FnMut(&[f64]) -> f64,
    {
        assert_eq!(leaf_data.len(), analytic.len());
        let mut probe = leaf_data.to_vec();
        for i in 0..probe.len() {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-3);
            let rel = (analytic[i] - fd).abs() / denom;
            assert!(
                rel < tol,
                "coordinate {i}: analytic {} vs fd {fd}, rel err {rel}",
                analytic[i]
            );
        }
    }
}
