//! Dense `f64` matrices with reverse-mode automatic differentiation.
//!
//! The design is deliberately small: every tensor is a two-dimensional,
//! row-major buffer; there are no views, no strides and no broadcasting
//! beyond the row-wise case the model needs (bias addition). Gradients are
//! recorded on an explicit [`Tape`] that is created per forward pass and
//! consumed by [`Tape::backward`]. Tapes nest freely: an inner optimization
//! loop can differentiate with respect to one input via
//! [`Tape::grad_wrt_input`] without touching the gradient buffers of any
//! other tensor, which is what keeps model parameters pristine while a
//! perturbation is being optimized against them.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

pub type TensorId = u64;

/// A shared handle to an immutable-shape, interior-mutable matrix.
///
/// Cloning a `Tensor` clones the handle, not the buffer. Parameter tensors
/// live across many tapes; their `grad` buffer persists until explicitly
/// cleared so an optimizer can consume it between passes.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

struct Inner {
    id: TensorId,
    rows: usize,
    cols: usize,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

impl Tensor {
    fn new(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("empty shape {rows}x{cols}"),
            });
        }
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                op: "tensor",
                detail: "non-finite value in constructor".into(),
            });
        }
        Ok(Tensor(Rc::new(Inner {
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            rows,
            cols,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
        })))
    }

    /// A differentiable leaf (model parameter, adversarial delta).
    pub fn leaf(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(rows, cols, data, true)
    }

    /// A non-differentiable constant.
    pub fn constant(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(rows, cols, data, false)
    }

    /// A 1x1 constant.
    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(1, 1, vec![v], false)
    }

    /// A constant copy of this tensor's current values.
    pub fn detach(&self) -> Self {
        Tensor::new(self.rows(), self.cols(), self.to_vec(), false)
            .expect("detach of a valid tensor cannot fail")
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn len(&self) -> usize {
        self.0.rows * self.0.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::Shape {
                op: "item",
                detail: format!("expected 1x1, got {}x{}", self.rows(), self.cols()),
            });
        }
        Ok(self.0.data.borrow()[0])
    }

    /// Overwrites the buffer in place. Shape is fixed for the tensor's life.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Shape {
                op: "set_data",
                detail: format!("expected {} values, got {}", self.len(), values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                op: "set_data",
                detail: "non-finite value".into(),
            });
        }
        self.0.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &(self.rows(), self.cols()))
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

/// The primitive vocabulary. Everything the model and the losses compute is
/// a composition of these kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    /// `A @ B`, or `A @ B^T` when `attrs.transpose_b` is set.
    Matmul,
    /// Elementwise sum; the second operand may be a single row, which is
    /// added to every row of the first.
    Add,
    /// Elementwise (Hadamard) product of equal shapes.
    Mul,
    /// Multiplication by a fixed scalar from `attrs.scalar`.
    Scale,
    /// Vertical stacking of operands with equal column counts.
    ConcatRows,
    /// Row range `attrs.range` of the operand.
    SliceRows,
    /// Row lookup `attrs.ids` into an embedding table.
    EmbeddingGather,
    /// Per-row standardization followed by a learned affine map
    /// `(x, gamma, beta)`.
    LayerNorm,
    Relu,
    /// Row-wise softmax with max subtraction.
    SoftmaxRows,
    /// Row-wise log-softmax, fused for stability.
    LogSoftmaxRows,
    /// Mean over all entries, producing 1x1.
    Mean,
    /// Sum over all entries, producing 1x1.
    Sum,
    /// Elementwise natural logarithm; the domain is strictly positive.
    Log,
}

pub const ALL_PRIMITIVES: [PrimitiveKind; 14] = [
    PrimitiveKind::Matmul,
    PrimitiveKind::Add,
    PrimitiveKind::Mul,
    PrimitiveKind::Scale,
    PrimitiveKind::ConcatRows,
    PrimitiveKind::SliceRows,
    PrimitiveKind::EmbeddingGather,
    PrimitiveKind::LayerNorm,
    PrimitiveKind::Relu,
    PrimitiveKind::SoftmaxRows,
    PrimitiveKind::LogSoftmaxRows,
    PrimitiveKind::Mean,
    PrimitiveKind::Sum,
    PrimitiveKind::Log,
];

/// Per-application attributes. Only the fields a kind reads are meaningful.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub scalar: f64,
    pub range: (usize, usize),
    pub ids: Vec<usize>,
    pub transpose_b: bool,
    pub eps: f64,
}

struct Node {
    kind: PrimitiveKind,
    attrs: Attrs,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Mapping from leaf tensors to `d loss / d leaf`, returned by
/// [`Tape::backward`].
#[derive(Debug)]
pub struct GradientMap {
    grads: HashMap<TensorId, Vec<f64>>,
}

impl GradientMap {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A Wengert list recording one forward pass.
///
/// A node is recorded only when its output is differentiable, i.e. when some
/// input requires a gradient. Pure constant arithmetic flows through the same
/// kernels without leaving a trace.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// A tape that never records, for pure inference. Differentiating
    /// against it is a state error.
    pub fn no_grad() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Uniform entry point for every primitive. The typed helpers below are
    /// thin wrappers over this dispatcher.
    pub fn primitive_forward(
        &self,
        kind: PrimitiveKind,
        inputs: &[&Tensor],
        attrs: &Attrs,
    ) -> Result<Tensor> {
        validate(kind, inputs, attrs)?;
        let (rows, cols, data) = compute(kind, inputs, attrs)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                op: op_name(kind),
                detail: "non-finite value in output".into(),
            });
        }
        let requires_grad = self.recording && inputs.iter().any(|t| t.requires_grad());
        let out = Tensor::new(rows, cols, data, requires_grad)?;
        if requires_grad {
            self.nodes.borrow_mut().push(Node {
                kind,
                attrs: attrs.clone(),
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: out.clone(),
            });
        }
        Ok(out)
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.primitive_forward(PrimitiveKind::Matmul, &[a, b], &Attrs::default())
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let attrs = Attrs { transpose_b: true, ..Attrs::default() };
        self.primitive_forward(PrimitiveKind::Matmul, &[a, b], &attrs)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.primitive_forward(PrimitiveKind::Add, &[a, b], &Attrs::default())
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.primitive_forward(PrimitiveKind::Mul, &[a, b], &Attrs::default())
    }

    pub fn scale(&self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let attrs = Attrs { scalar: factor, ..Attrs::default() };
        self.primitive_forward(PrimitiveKind::Scale, &[a], &attrs)
    }

    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        self.primitive_forward(PrimitiveKind::ConcatRows, parts, &Attrs::default())
    }

    pub fn slice_rows(&self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let attrs = Attrs { range: (start, end), ..Attrs::default() };
        self.primitive_forward(PrimitiveKind::SliceRows, &[a], &attrs)
    }

    pub fn gather(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let attrs = Attrs { ids: ids.to_vec(), ..Attrs::default() };
        self.primitive_forward(PrimitiveKind::EmbeddingGather, &[table], &attrs)
    }

    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let attrs = Attrs { eps, ..Attrs::default() };
        self.primitive_forward(PrimitiveKind::LayerNorm, &[x, gamma, beta], &attrs)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        self.primitive_forward(PrimitiveKind::Relu, &[a], &Attrs::default())
    }

    pub fn softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        self.primitive_forward(PrimitiveKind::SoftmaxRows, &[a], &Attrs::default())
    }

    pub fn log_softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        self.primitive_forward(PrimitiveKind::LogSoftmaxRows, &[a], &Attrs::default())
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        self.primitive_forward(PrimitiveKind::Mean, &[a], &Attrs::default())
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        self.primitive_forward(PrimitiveKind::Sum, &[a], &Attrs::default())
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        self.primitive_forward(PrimitiveKind::Log, &[a], &Attrs::default())
    }

    /// `softmax(x / tau)` row-wise. `tau` must be a positive finite number.
    pub fn softmax_with_temperature(&self, a: &Tensor, tau: f64) -> Result<Tensor> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
        }
        let scaled = self.scale(a, 1.0 / tau)?;
        self.softmax_rows(&scaled)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    ///
    /// Visits every recorded node exactly once, newest first. Gradients for
    /// leaf tensors with `requires_grad` are accumulated into their `grad`
    /// buffers and also returned as a map.
    pub fn backward(self, loss: &Tensor) -> Result<GradientMap> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                loss.rows(),
                loss.cols()
            )));
        }
        let nodes = self.nodes.into_inner();
        let produced: HashSet<TensorId> = nodes.iter().map(|n| n.output.id()).collect();
        if !produced.contains(&loss.id()) {
            return Err(Error::State("loss was not produced on this tape".into()));
        }

        let mut adjoint: HashMap<TensorId, Vec<f64>> = HashMap::new();
        adjoint.insert(loss.id(), vec![1.0]);

        for node in nodes.iter().rev() {
            let Some(out_adj) = adjoint.remove(&node.output.id()) else {
                continue;
            };
            let contributions = vjp(node, &out_adj, |i| node.inputs[i].requires_grad())?;
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contribution {
                    add_into(adjoint.entry(input.id()).or_insert_with(|| vec![0.0; input.len()]), &c);
                }
            }
        }

        // Only leaves keep their gradient; intermediate adjoints die with the
        // tape.
        let mut grads = HashMap::new();
        for node in &nodes {
            for input in &node.inputs {
                if input.requires_grad() && !produced.contains(&input.id()) {
                    if let Some(adj) = adjoint.get(&input.id()) {
                        if !grads.contains_key(&input.id()) {
                            input.accumulate_grad(adj);
                            grads.insert(input.id(), adj.clone());
                        }
                    }
                }
            }
        }
        Ok(GradientMap { grads })
    }

    /// Gradient of `loss` with respect to `target` alone.
    ///
    /// The sweep is restricted to the subgraph between `target` and `loss`,
    /// and no `grad` buffer anywhere is written: bit-for-bit, every other
    /// tensor is left exactly as it was. This is the entry point for inner
    /// optimization loops that differentiate with respect to an input while
    /// model parameters sit on the same forward pass.
    pub fn grad_wrt_input(&self, loss: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "grad_wrt_input needs a scalar loss, got {}x{}",
                loss.rows(),
                loss.cols()
            )));
        }
        let nodes = self.nodes.borrow();
        if !nodes.iter().any(|n| n.output.id() == loss.id()) {
            return Err(Error::State("loss was not produced on this tape".into()));
        }
        let on_tape = nodes
            .iter()
            .any(|n| n.inputs.iter().any(|t| t.id() == target.id()) || n.output.id() == target.id());
        if !on_tape {
            return Err(Error::State("target does not appear on this tape".into()));
        }

        // Forward scan: which outputs depend on the target?
        let mut reaches: HashSet<TensorId> = HashSet::new();
        reaches.insert(target.id());
        for node in nodes.iter() {
            if node.inputs.iter().any(|t| reaches.contains(&t.id())) {
                reaches.insert(node.output.id());
            }
        }
        if !reaches.contains(&loss.id()) {
            return Ok(vec![0.0; target.len()]);
        }

        let mut adjoint: HashMap<TensorId, Vec<f64>> = HashMap::new();
        adjoint.insert(loss.id(), vec![1.0]);
        for node in nodes.iter().rev() {
            if !reaches.contains(&node.output.id()) {
                continue;
            }
            // The target's own adjoint must survive even when the target was
            // produced by an earlier node.
            if node.output.id() == target.id() {
                continue;
            }
            let Some(out_adj) = adjoint.remove(&node.output.id()) else {
                continue;
            };
            let contributions = vjp(node, &out_adj, |i| reaches.contains(&node.inputs[i].id()))?;
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contribution {
                    add_into(adjoint.entry(input.id()).or_insert_with(|| vec![0.0; input.len()]), &c);
                }
            }
        }
        Ok(adjoint.remove(&target.id()).unwrap_or_else(|| vec![0.0; target.len()]))
    }
}

fn add_into(acc: &mut [f64], contribution: &[f64]) {
    for (a, c) in acc.iter_mut().zip(contribution) {
        *a += c;
    }
}

fn op_name(kind: PrimitiveKind) -> &'static str {
    match kind {
        PrimitiveKind::Matmul => "matmul",
        PrimitiveKind::Add => "add",
        PrimitiveKind::Mul => "mul",
        PrimitiveKind::Scale => "scale",
        PrimitiveKind::ConcatRows => "concat-rows",
        PrimitiveKind::SliceRows => "slice-rows",
        PrimitiveKind::EmbeddingGather => "embedding-gather",
        PrimitiveKind::LayerNorm => "layer-norm",
        PrimitiveKind::Relu => "relu",
        PrimitiveKind::SoftmaxRows => "softmax-rows",
        PrimitiveKind::LogSoftmaxRows => "log-softmax-rows",
        PrimitiveKind::Mean => "mean",
        PrimitiveKind::Sum => "sum",
        PrimitiveKind::Log => "log",
    }
}

fn arity_error(kind: PrimitiveKind, got: usize, want: &str) -> Error {
    Error::Shape {
        op: op_name(kind),
        detail: format!("expected {want} inputs, got {got}"),
    }
}

fn validate(kind: PrimitiveKind, inputs: &[&Tensor], attrs: &Attrs) -> Result<()> {
    use PrimitiveKind::*;
    let shape_err = |detail: String| Error::Shape { op: op_name(kind), detail };
    match kind {
        Matmul => {
            let [a, b] = inputs else { return Err(arity_error(kind, inputs.len(), "2")) };
            let inner_ok = if attrs.transpose_b { a.cols() == b.cols() } else { a.cols() == b.rows() };
            if !inner_ok {
                return Err(shape_err(format!(
                    "{}x{} @ {}x{}{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols(),
                    if attrs.transpose_b { " (transposed)" } else { "" }
                )));
            }
        }
        Add => {
            let [a, b] = inputs else { return Err(arity_error(kind, inputs.len(), "2")) };
            let broadcast = b.rows() == 1 && a.cols() == b.cols();
            let exact = a.rows() == b.rows() && a.cols() == b.cols();
            if !(exact || broadcast) {
                return Err(shape_err(format!(
                    "{}x{} + {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
        }
        Mul => {
            let [a, b] = inputs else { return Err(arity_error(kind, inputs.len(), "2")) };
            if a.rows() != b.rows() || a.cols() != b.cols() {
                return Err(shape_err(format!(
                    "{}x{} * {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
        }
        Scale => {
            if inputs.len() != 1 {
                return Err(arity_error(kind, inputs.len(), "1"));
            }
            if !attrs.scalar.is_finite() {
                return Err(Error::Parameter(format!("scale factor must be finite, got {}", attrs.scalar)));
            }
        }
        ConcatRows => {
            if inputs.is_empty() {
                return Err(arity_error(kind, 0, "at least 1"));
            }
            let cols = inputs[0].cols();
            if inputs.iter().any(|t| t.cols() != cols) {
                return Err(shape_err("operands disagree on column count".into()));
            }
        }
        SliceRows => {
            let [a] = inputs else { return Err(arity_error(kind, inputs.len(), "1")) };
            let (s, e) = attrs.range;
            if s >= e || e > a.rows() {
                return Err(shape_err(format!("range {s}..{e} out of {} rows", a.rows())));
            }
        }
        EmbeddingGather => {
            let [table] = inputs else { return Err(arity_error(kind, inputs.len(), "1")) };
            if attrs.ids.is_empty() {
                return Err(shape_err("no ids to gather".into()));
            }
            if let Some(bad) = attrs.ids.iter().find(|&&id| id >= table.rows()) {
                return Err(shape_err(format!("id {bad} out of {} rows", table.rows())));
            }
        }
        LayerNorm => {
            let [x, gamma, beta] = inputs else { return Err(arity_error(kind, inputs.len(), "3")) };
            if gamma.rows() != 1 || beta.rows() != 1 || gamma.cols() != x.cols() || beta.cols() != x.cols() {
                return Err(shape_err("gamma and beta must be 1 x cols".into()));
            }
            if !(attrs.eps.is_finite() && attrs.eps > 0.0) {
                return Err(Error::Parameter(format!("layer-norm eps must be > 0, got {}", attrs.eps)));
            }
        }
        Relu | SoftmaxRows | LogSoftmaxRows | Mean | Sum | Log => {
            if inputs.len() != 1 {
                return Err(arity_error(kind, inputs.len(), "1"));
            }
        }
    }
    Ok(())
}

fn compute(kind: PrimitiveKind, inputs: &[&Tensor], attrs: &Attrs) -> Result<(usize, usize, Vec<f64>)> {
    use PrimitiveKind::*;
    Ok(match kind {
        Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (ad, bd) = (a.data(), b.data());
            if attrs.transpose_b {
                let (m, k, n) = (a.rows(), a.cols(), b.rows());
                let mut out = vec![0.0; m * n];
                mm_nt(&ad, &bd, m, k, n, &mut out);
                (m, n, out)
            } else {
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut out = vec![0.0; m * n];
                mm_nn(&ad, &bd, m, k, n, &mut out);
                (m, n, out)
            }
        }
        Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut out = ad.clone();
            if b.rows() == a.rows() {
                add_into(&mut out, &bd);
            } else {
                for row in out.chunks_mut(a.cols()) {
                    add_into(row, &bd);
                }
            }
            (a.rows(), a.cols(), out)
        }
        Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let out = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
            (a.rows(), a.cols(), out)
        }
        Scale => {
            let a = inputs[0];
            let out = a.data().iter().map(|x| x * attrs.scalar).collect();
            (a.rows(), a.cols(), out)
        }
        ConcatRows => {
            let cols = inputs[0].cols();
            let rows = inputs.iter().map(|t| t.rows()).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for t in inputs {
                out.extend_from_slice(&t.data());
            }
            (rows, cols, out)
        }
        SliceRows => {
            let a = inputs[0];
            let (s, e) = attrs.range;
            let out = a.data()[s * a.cols()..e * a.cols()].to_vec();
            (e - s, a.cols(), out)
        }
        EmbeddingGather => {
            let table = inputs[0];
            let cols = table.cols();
            let data = table.data();
            let mut out = Vec::with_capacity(attrs.ids.len() * cols);
            for &id in &attrs.ids {
                out.extend_from_slice(&data[id * cols..(id + 1) * cols]);
            }
            (attrs.ids.len(), cols, out)
        }
        LayerNorm => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
            let cols = x.cols();
            let mut out = vec![0.0; x.len()];
            for (xr, yr) in xd.chunks(cols).zip(out.chunks_mut(cols)) {
                let (mu, inv) = row_norm_stats(xr, attrs.eps);
                for j in 0..cols {
                    yr[j] = (xr[j] - mu) * inv * gd[j] + bd[j];
                }
            }
            (x.rows(), cols, out)
        }
        Relu => {
            let a = inputs[0];
            let out = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
            (a.rows(), a.cols(), out)
        }
        SoftmaxRows => {
            let a = inputs[0];
            let mut out = a.to_vec();
            for row in out.chunks_mut(a.cols()) {
                softmax_row_in_place(row);
            }
            (a.rows(), a.cols(), out)
        }
        LogSoftmaxRows => {
            let a = inputs[0];
            let mut out = a.to_vec();
            for row in out.chunks_mut(a.cols()) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_z = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                for v in row.iter_mut() {
                    *v -= log_z;
                }
            }
            (a.rows(), a.cols(), out)
        }
        Mean => {
            let a = inputs[0];
            (1, 1, vec![a.data().iter().sum::<f64>() / a.len() as f64])
        }
        Sum => {
            let a = inputs[0];
            (1, 1, vec![a.data().iter().sum::<f64>()])
        }
        Log => {
            let a = inputs[0];
            if let Some(bad) = a.data().iter().find(|&&x| x <= 0.0) {
                return Err(Error::Numeric {
                    op: "log",
                    detail: format!("domain requires x > 0, got {bad}"),
                });
            }
            let out = a.data().iter().map(|x| x.ln()).collect();
            (a.rows(), a.cols(), out)
        }
    })
}

/// Softmax of one row with max subtraction; sums to 1 up to rounding.
fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn row_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

/// Vector-Jacobian products for one node. `want(i)` gates whether input `i`'s
/// contribution is materialized at all; both sweeps use this to skip branches
/// that cannot reach their respective targets.
fn vjp(
    node: &Node,
    out_adj: &[f64],
    want: impl Fn(usize) -> bool,
) -> Result<Vec<Option<Vec<f64>>>> {
    use PrimitiveKind::*;
    let mut contributions: Vec<Option<Vec<f64>>> = vec![None; node.inputs.len()];
    match node.kind {
        Matmul => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            let (m, k) = (a.rows(), a.cols());
            if node.attrs.transpose_b {
                // C = A @ B^T with B: n x k.
                let n = b.rows();
                if want(0) {
                    let mut da = vec![0.0; m * k];
                    mm_nn(out_adj, &b.data(), m, n, k, &mut da);
                    contributions[0] = Some(da);
                }
                if want(1) {
                    let mut db = vec![0.0; n * k];
                    mm_tn(out_adj, &a.data(), m, n, k, &mut db);
                    contributions[1] = Some(db);
                }
            } else {
                let n = b.cols();
                if want(0) {
                    let mut da = vec![0.0; m * k];
                    mm_nt(out_adj, &b.data(), m, n, k, &mut da);
                    contributions[0] = Some(da);
                }
                if want(1) {
                    let mut db = vec![0.0; k * n];
                    mm_tn(&a.data(), out_adj, m, k, n, &mut db);
                    contributions[1] = Some(db);
                }
            }
        }
        Add => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            if want(0) {
                contributions[0] = Some(out_adj.to_vec());
            }
            if want(1) {
                if b.rows() == a.rows() {
                    contributions[1] = Some(out_adj.to_vec());
                } else {
                    let mut db = vec![0.0; b.cols()];
                    for row in out_adj.chunks(a.cols()) {
                        add_into(&mut db, row);
                    }
                    contributions[1] = Some(db);
                }
            }
        }
        Mul => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            if want(0) {
                contributions[0] =
                    Some(out_adj.iter().zip(b.data().iter()).map(|(g, y)| g * y).collect());
            }
            if want(1) {
                contributions[1] =
                    Some(out_adj.iter().zip(a.data().iter()).map(|(g, x)| g * x).collect());
            }
        }
        Scale => {
            if want(0) {
                contributions[0] = Some(out_adj.iter().map(|g| g * node.attrs.scalar).collect());
            }
        }
        ConcatRows => {
            let cols = node.inputs[0].cols();
            let mut offset = 0;
            for (i, input) in node.inputs.iter().enumerate() {
                let span = input.rows() * cols;
                if want(i) {
                    contributions[i] = Some(out_adj[offset..offset + span].to_vec());
                }
                offset += span;
            }
        }
        SliceRows => {
            if want(0) {
                let a = &node.inputs[0];
                let (s, _) = node.attrs.range;
                let mut da = vec![0.0; a.len()];
                da[s * a.cols()..s * a.cols() + out_adj.len()].copy_from_slice(out_adj);
                contributions[0] = Some(da);
            }
        }
        EmbeddingGather => {
            if want(0) {
                let table = &node.inputs[0];
                let cols = table.cols();
                let mut dt = vec![0.0; table.len()];
                for (row, &id) in out_adj.chunks(cols).zip(&node.attrs.ids) {
                    add_into(&mut dt[id * cols..(id + 1) * cols], row);
                }
                contributions[0] = Some(dt);
            }
        }
        LayerNorm => {
            let (x, gamma) = (&node.inputs[0], &node.inputs[1]);
            let cols = x.cols();
            let xd = x.data();
            let gd = gamma.data();
            let mut dx = if want(0) { Some(vec![0.0; x.len()]) } else { None };
            let mut dgamma = if want(1) { Some(vec![0.0; cols]) } else { None };
            let mut dbeta = if want(2) { Some(vec![0.0; cols]) } else { None };
            for (r, (xr, gr)) in xd.chunks(cols).zip(out_adj.chunks(cols)).enumerate() {
                let (mu, inv) = row_norm_stats(xr, node.attrs.eps);
                let xhat: Vec<f64> = xr.iter().map(|&v| (v - mu) * inv).collect();
                if let Some(dg) = dgamma.as_mut() {
                    for j in 0..cols {
                        dg[j] += gr[j] * xhat[j];
                    }
                }
                if let Some(db) = dbeta.as_mut() {
                    add_into(db, gr);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxhat: Vec<f64> = (0..cols).map(|j| gr[j] * gd[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    let row = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        row[j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
            contributions[0] = dx;
            contributions[1] = dgamma;
            contributions[2] = dbeta;
        }
        Relu => {
            if want(0) {
                let x = node.inputs[0].data();
                contributions[0] = Some(
                    out_adj.iter().zip(x.iter()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
        }
        SoftmaxRows => {
            if want(0) {
                let y = node.output.data();
                let cols = node.output.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(out_adj.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                contributions[0] = Some(dx);
            }
        }
        LogSoftmaxRows => {
            if want(0) {
                let y = node.output.data();
                let cols = node.output.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(out_adj.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..cols {
                        dr[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                contributions[0] = Some(dx);
            }
        }
        Mean => {
            if want(0) {
                let a = &node.inputs[0];
                let g = out_adj[0] / a.len() as f64;
                contributions[0] = Some(vec![g; a.len()]);
            }
        }
        Sum => {
            if want(0) {
                let a = &node.inputs[0];
                contributions[0] = Some(vec![out_adj[0]; a.len()]);
            }
        }
        Log => {
            if want(0) {
                let x = node.inputs[0].data();
                contributions[0] = Some(out_adj.iter().zip(x.iter()).map(|(g, v)| g / v).collect());
            }
        }
    }
    Ok(contributions)
}

// ── matmul kernels ──────────────────────────────────────────────────────────
// Plain loops ordered for contiguous row access; the optimizer vectorizes the
// inner zips. All kernels accumulate into `out`.

/// out[m x n] += a[m x k] @ b[k x n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m x n] += a[m x k] @ b[n x k]^T
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k x n] += a[m x k]^T @ b[m x n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
