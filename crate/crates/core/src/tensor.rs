//! Dense f64 tensors with a small reverse-mode tape.
//!
//! [`Tensor`] is a plain row-major value. [`Var`] wraps a tensor together with
//! the [`Tape`] it was produced on; every operation on a `Var` records a
//! backward rule when the tape is recording and at least one input requires a
//! gradient. A tape built with [`Tape::inference`] records nothing, which is
//! how scoring and inverse passes run without paying for saved activations.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss is not recorded on a tape")]
    NotOnTape,
    #[error("loss must have exactly one element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of f64 values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::InvalidArgument(format!(
                "dimension sizes must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidArgument(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Tensor {
            shape: vec![n],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank: self.rank(),
            });
        }
        if len == 0 || start + len > self.shape[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "narrow [{start}, {}) out of range for axis size {}",
                start + len,
                self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.rank(),
            });
        }
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    /// Sums `self` down to `shape`, undoing trailing-aligned broadcasting.
    fn sum_to_shape(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let rank = self.rank();
        let offset = rank - shape.len();
        let mut target = vec![1usize; rank];
        target[offset..].copy_from_slice(shape);
        let out_strides = broadcast_strides(&target, rank);
        let mut out = vec![0.0; shape.iter().product()];
        let plan = BlockPlan::new(&self.shape, &[&out_strides]);
        let len = plan.len;
        let collapsed = plan.kinds[0] == 0;
        plan.for_each(|block, offsets| {
            let src = &self.data[block * len..(block + 1) * len];
            let o = offsets[0];
            if collapsed {
                out[o] += src.iter().sum::<f64>();
            } else {
                for (d, v) in out[o..o + len].iter_mut().zip(src) {
                    *d += v;
                }
            }
        });
        Tensor {
            shape: shape.to_vec(),
            data: out,
        }
    }
}

/// Splits an iteration over `shape` into a trailing block of `len`
/// elements, within which each operand is either contiguous (stride 1) or
/// constant (stride 0), and an odometer over the leading dimensions.
struct BlockPlan<'s> {
    shape: &'s [usize],
    strides: Vec<&'s [usize]>,
    outer: usize,
    len: usize,
    /// Per operand: 1 if contiguous within the block, 0 if constant.
    kinds: Vec<usize>,
}

impl<'s> BlockPlan<'s> {
    fn new(shape: &'s [usize], strides: &[&'s [usize]]) -> Self {
        let mut d = shape.len();
        while d > 0 && shape[d - 1] == 1 {
            d -= 1;
        }
        let kinds: Vec<usize> = if d == 0 {
            vec![0; strides.len()]
        } else {
            strides.iter().map(|s| usize::from(s[d - 1] != 0)).collect()
        };
        let mut len = 1;
        while d > 0 {
            let dim = shape[d - 1];
            let same = dim == 1
                || strides
                    .iter()
                    .zip(&kinds)
                    .all(|(s, &k)| if k == 0 { s[d - 1] == 0 } else { s[d - 1] == len });
            if !same {
                break;
            }
            len *= dim;
            d -= 1;
        }
        BlockPlan {
            shape,
            strides: strides.to_vec(),
            outer: d,
            len,
            kinds,
        }
    }

    /// Calls `f(block_index, operand_offsets)` for every block in order.
    fn for_each(&self, mut f: impl FnMut(usize, &[usize])) {
        let dims = &self.shape[..self.outer];
        let blocks: usize = dims.iter().product();
        let mut idx = vec![0usize; self.outer];
        let mut offsets = vec![0usize; self.strides.len()];
        for block in 0..blocks {
            f(block, &offsets);
            for d in (0..self.outer).rev() {
                idx[d] += 1;
                for (o, s) in offsets.iter_mut().zip(&self.strides) {
                    *o += s[d];
                }
                if idx[d] < dims[d] {
                    break;
                }
                for (o, s) in offsets.iter_mut().zip(&self.strides) {
                    *o -= s[d] * dims[d];
                }
                idx[d] = 0;
            }
        }
    }
}

/// Strides of `shape` when viewed at rank `rank`, with zero stride on size-1
/// (broadcast) dimensions.
fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn broadcast_apply(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        return Ok(a.zip_map(b, f));
    }
    let shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let rank = shape.len();
    let n: usize = shape.iter().product();
    // Fast path: `b` is a single value.
    if b.numel() == 1 && shape == a.shape {
        let bv = b.data[0];
        return Ok(a.map(|x| f(x, bv)));
    }
    if a.numel() == 1 && shape == b.shape {
        let av = a.data[0];
        return Ok(b.map(|y| f(av, y)));
    }
    let sa = broadcast_strides(&a.shape, rank);
    let sb = broadcast_strides(&b.shape, rank);
    let mut data = Vec::with_capacity(n);
    let plan = BlockPlan::new(&shape, &[&sa, &sb]);
    let len = plan.len;
    let (ka, kb) = (plan.kinds[0], plan.kinds[1]);
    plan.for_each(|_, offsets| {
        let (ia, ib) = (offsets[0], offsets[1]);
        match (ka, kb) {
            (1, 1) => data.extend(
                a.data[ia..ia + len]
                    .iter()
                    .zip(&b.data[ib..ib + len])
                    .map(|(&x, &y)| f(x, y)),
            ),
            (1, _) => {
                let y = b.data[ib];
                data.extend(a.data[ia..ia + len].iter().map(|&x| f(x, y)));
            }
            (_, 1) => {
                let x = a.data[ia];
                data.extend(b.data[ib..ib + len].iter().map(|&y| f(x, y)));
            }
            _ => data.extend(std::iter::repeat_n(f(a.data[ia], b.data[ib]), len)),
        }
    });
    Ok(Tensor { shape, data })
}

/// Unary functions available to [`Var::map`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Negate,
}

impl UnaryFn {
    fn name(self) -> &'static str {
        match self {
            UnaryFn::Exp => "exp",
            UnaryFn::Log => "log",
            UnaryFn::Tanh => "tanh",
            UnaryFn::Sigmoid => "sigmoid",
            UnaryFn::Relu => "relu",
            UnaryFn::Negate => "negate",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryFn::Exp => x.exp(),
            UnaryFn::Log => x.ln(),
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            UnaryFn::Relu => x.max(0.0),
            UnaryFn::Negate => -x,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryFn::Exp => y,
            UnaryFn::Log => 1.0 / x,
            UnaryFn::Tanh => 1.0 - y * y,
            UnaryFn::Sigmoid => y * (1.0 - y),
            UnaryFn::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryFn::Negate => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Append-only record of the operations performed during one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    id: usize,
}

thread_local! {
    static NEXT_TAPE_ID: Cell<usize> = const { Cell::new(1) };
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that only evaluates; nothing is recorded and no gradients exist.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        let id = NEXT_TAPE_ID.with(|c| {
            let id = c.get();
            c.set(id + 1);
            id
        });
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording,
            id,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable leaf. On an inference tape this is a constant.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let node = self.recording.then(|| self.push(Vec::new(), None));
        Var {
            tape: self,
            value: Rc::new(value),
            node,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            value: Rc::new(value),
            node: None,
        }
    }

    fn push(&self, parents: Vec<usize>, backward: Option<BackwardFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, backward });
        nodes.len() - 1
    }

    fn tracks(&self, inputs: &[&Var<'_>]) -> bool {
        self.recording && inputs.iter().any(|v| v.node.is_some())
    }

    fn record<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        inputs: &[&Var<'t>],
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Result<Var<'t>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let node = if self.tracks(inputs) {
            let parents = inputs
                .iter()
                .map(|v| v.node.unwrap_or(usize::MAX))
                .collect();
            Some(self.push(parents, Some(Box::new(backward))))
        } else {
            None
        };
        Ok(Var {
            tape: self,
            value: Rc::new(value),
            node,
        })
    }

    /// Reverse pass from a single-element loss.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::NotOnTape);
        }
        if loss.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.value.shape.clone()));
        }
        if !loss.value.is_finite() {
            return Err(TensorError::NonFinite { op: "loss" });
        }
        let root = loss.node.ok_or(TensorError::NotOnTape)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    grads[id] = Some(g);
                }
                Some(back) => {
                    let parent_grads = back(&g);
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        if p == usize::MAX {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }
}

/// Gradients of a loss with respect to every leaf on the tape.
pub struct Gradients {
    tape_id: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `leaf`; zeros if the loss does not depend on it.
    pub fn wrt(&self, leaf: &Var<'_>) -> Tensor {
        debug_assert_eq!(leaf.tape.id, self.tape_id);
        leaf.node
            .and_then(|id| self.grads.get(id).cloned().flatten())
            .unwrap_or_else(|| Tensor::zeros(leaf.value.shape()))
    }
}

/// A tensor value living on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    value: Rc<Tensor>,
    node: Option<usize>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(node={:?}, {:?})", self.node, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn map(&self, f: UnaryFn) -> Result<Var<'t>> {
        if f == UnaryFn::Log {
            if let Some(bad) = self.value.data.iter().find(|&&v| v <= 0.0) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive entry {bad}"),
                });
            }
        }
        let y = self.value.map(|v| f.apply(v));
        let deriv = self.tape.tracks(&[self]).then(|| {
            Tensor {
                shape: y.shape.clone(),
                data: self
                    .value
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(&xv, &yv)| f.derivative(xv, yv))
                    .collect(),
            }
        });
        self.tape.record(f.name(), y, &[self], move |g| {
            let d = deriv.as_ref().expect("derivative saved when tracked");
            vec![g.zip_map(d, |a, b| a * b)]
        })
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.map(UnaryFn::Exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.map(UnaryFn::Log)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.map(UnaryFn::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.map(UnaryFn::Sigmoid)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.map(UnaryFn::Relu)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.map(UnaryFn::Negate)
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let y = self.value.map(|v| v * c);
        self.tape
            .record("scale", y, &[self], move |g| vec![g.map(|v| v * c)])
    }

    /// Adds a constant.
    pub fn shift(&self, c: f64) -> Result<Var<'t>> {
        let y = self.value.map(|v| v + c);
        self.tape.record("shift", y, &[self], |g| vec![g.clone()])
    }

    pub fn binary(&self, other: &Var<'t>, op: BinaryOp) -> Result<Var<'t>> {
        let a = self.value.clone();
        let b = other.value.clone();
        if op == BinaryOp::Div && b.data.contains(&0.0) {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        let y = match op {
            BinaryOp::Add => broadcast_apply("add", &a, &b, |x, y| x + y)?,
            BinaryOp::Sub => broadcast_apply("sub", &a, &b, |x, y| x - y)?,
            BinaryOp::Mul => broadcast_apply("mul", &a, &b, |x, y| x * y)?,
            BinaryOp::Div => broadcast_apply("div", &a, &b, |x, y| x / y)?,
        };
        let (sa, sb) = (a.shape.clone(), b.shape.clone());
        self.tape.record(op.name(), y, &[self, other], move |g| {
            let (ga, gb) = match op {
                BinaryOp::Add => (g.clone(), g.clone()),
                BinaryOp::Sub => (g.clone(), g.map(|v| -v)),
                BinaryOp::Mul => (
                    broadcast_apply("mul", g, &b, |x, y| x * y).expect("shape checked"),
                    broadcast_apply("mul", g, &a, |x, y| x * y).expect("shape checked"),
                ),
                BinaryOp::Div => {
                    let ga = broadcast_apply("div", g, &b, |x, y| x / y).expect("shape checked");
                    let ab = broadcast_apply("div", &a, &b, |x, y| x / (y * y))
                        .expect("shape checked");
                    let gb = broadcast_apply("mul", g, &ab, |x, y| -x * y).expect("shape checked");
                    (ga, gb)
                }
            };
            vec![ga.sum_to_shape(&sa), gb.sum_to_shape(&sb)]
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Div)
    }

    /// Reduces over `axes` (all axes when `None`). Reduced axes are removed;
    /// a full reduction yields shape `[1]`.
    pub fn reduce(&self, op: Reduction, axes: Option<&[usize]>) -> Result<Var<'t>> {
        let shape = self.value.shape.clone();
        let rank = shape.len();
        let axes: Vec<usize> = match axes {
            None => (0..rank).collect(),
            Some(a) => {
                for &ax in a {
                    if ax >= rank {
                        return Err(TensorError::InvalidAxis {
                            op: "reduce",
                            axis: ax,
                            rank,
                        });
                    }
                }
                let mut a = a.to_vec();
                a.sort_unstable();
                a.dedup();
                a
            }
        };
        // keep-dims shape used for the broadcasting backward
        let kept: Vec<usize> = (0..rank)
            .map(|d| if axes.contains(&d) { 1 } else { shape[d] })
            .collect();
        let count: usize = axes.iter().map(|&d| shape[d]).product();
        let mut out = self.value.sum_to_shape(&kept);
        if op == Reduction::Mean {
            let inv = 1.0 / count as f64;
            out.data.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape: Vec<usize> = (0..rank)
            .filter(|d| !axes.contains(d))
            .map(|d| shape[d])
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        out.shape = out_shape;
        let factor = if op == Reduction::Mean {
            1.0 / count as f64
        } else {
            1.0
        };
        self.tape.record("reduce", out, &[self], move |g| {
            let gk = Tensor {
                shape: kept.clone(),
                data: g.data.clone(),
            };
            let ones = Tensor::ones(&shape);
            let expanded =
                broadcast_apply("reduce", &ones, &gk, |_, y| y * factor).expect("keep-dims");
            vec![expanded]
        })
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.reduce(Reduction::Sum, None)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.reduce(Reduction::Mean, None)
    }

    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(Reduction::Sum, Some(axes))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let y = self.value.reshape(shape)?;
        let orig = self.value.shape.clone();
        self.tape.record("reshape", y, &[self], move |g| {
            vec![Tensor {
                shape: orig.clone(),
                data: g.data.clone(),
            }]
        })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let y = self.value.narrow(axis, start, len)?;
        let shape = self.value.shape.clone();
        self.tape.record("narrow", y, &[self], move |g| {
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let dim = shape[axis];
            let mut out = Tensor::zeros(&shape);
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                let src = o * len * inner;
                out.data[dst..dst + len * inner].copy_from_slice(&g.data[src..src + len * inner]);
            }
            vec![out]
        })
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?
            .tape;
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value.as_ref()).collect();
        let y = Tensor::concat(&values, axis)?;
        let sizes: Vec<usize> = parts.iter().map(|p| p.value.shape[axis]).collect();
        let refs: Vec<&Var<'t>> = parts.iter().collect();
        tape.record("concat", y, &refs, move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let part = g.narrow(axis, start, len).expect("concat sizes");
                    start += len;
                    part
                })
                .collect()
        })
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value.clone(), other.value.clone());
        if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut y = vec![0.0; m * n];
        gemm(m, k, n, &a.data, false, &b.data, false, &mut y, 0.0);
        let y = Tensor {
            shape: vec![m, n],
            data: y,
        };
        self.tape.record("matmul", y, &[self, other], move |g| {
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, &g.data, false, &b.data, true, &mut ga, 0.0);
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, &a.data, true, &g.data, false, &mut gb, 0.0);
            vec![
                Tensor {
                    shape: vec![m, k],
                    data: ga,
                },
                Tensor {
                    shape: vec![k, n],
                    data: gb,
                },
            ]
        })
    }

    /// Stride-1 cross-correlation with zero "same" padding.
    ///
    /// `self` is `B x C x H x W`, `kernel` is `O x C x kh x kw` with odd
    /// `kh`/`kw`, `bias` has `O` entries.
    pub fn conv2d(&self, kernel: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let geom = ConvGeometry::new(self.shape(), kernel.shape(), bias.shape())?;
        let x = self.value.clone();
        let w = kernel.value.clone();
        let y = conv2d_forward(&geom, &x.data, &w.data, &bias.value.data);
        let y = Tensor {
            shape: vec![geom.batch, geom.out_ch, geom.h, geom.w],
            data: y,
        };
        self.tape
            .record("conv2d", y, &[self, kernel, bias], move |g| {
                let (gx, gw, gb) = conv2d_backward(&geom, &x.data, &w.data, &g.data);
                vec![
                    Tensor {
                        shape: vec![geom.batch, geom.in_ch, geom.h, geom.w],
                        data: gx,
                    },
                    Tensor {
                        shape: vec![geom.out_ch, geom.in_ch, geom.kh, geom.kw],
                        data: gw,
                    },
                    Tensor {
                        shape: vec![geom.out_ch],
                        data: gb,
                    },
                ]
            })
    }
}

/// `c = a' * b' + beta * c` with row-major operands; `a'` is `m x k`, `b'` is
/// `k x n`, each optionally stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    let sa = if a_t { Strided::new(0, 1, m) } else { Strided::new(0, k, 1) };
    let sb = if b_t { Strided::new(0, 1, k) } else { Strided::new(0, n, 1) };
    if beta == 0.0 {
        c[..m * n].fill(0.0);
    } else if beta != 1.0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
    }
    gemm_strided(m, k, n, a, sa, b, sb, c, Strided::new(0, n, 1));
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], k: &[usize], b: &[usize]) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 || k[1] != x[1] || b != [k[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: k.to_vec(),
            });
        }
        if k[2].is_multiple_of(2) || k[3].is_multiple_of(2) {
            return Err(TensorError::InvalidArgument(format!(
                "conv2d kernel sizes must be odd, got {}x{}",
                k[2], k[3]
            )));
        }
        Ok(ConvGeometry {
            batch: x[0],
            in_ch: x[1],
            out_ch: k[0],
            h: x[2],
            w: x[3],
            kh: k[2],
            kw: k[3],
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Row width of a zero-padded plane.
    fn pw(&self) -> usize {
        self.w + self.kw - 1
    }

    /// Channel stride of a padded image. The `kw - 1` slack keeps shifted
    /// reads of the junk columns in bounds.
    fn plane(&self) -> usize {
        (self.h + self.kh - 1) * self.pw() + self.kw - 1
    }

    /// Output columns in padded-width layout (`h` rows of `pw`, the last
    /// `kw - 1` of each row are junk).
    fn span(&self) -> usize {
        self.h * self.pw()
    }
}

/// Strided operand: element `(i, j)` lives at `offset + i * rs + j * cs`.
#[derive(Clone, Copy)]
struct Strided {
    offset: usize,
    rs: usize,
    cs: usize,
}

impl Strided {
    fn new(offset: usize, rs: usize, cs: usize) -> Self {
        Strided { offset, rs, cs }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }

    fn t(self) -> Self {
        Strided::new(self.offset, self.cs, self.rs)
    }
}

// Row count below which the product is computed transposed; the packed
// microkernel is 8 rows tall.
const SHORT_ROWS: usize = 8;

/// `c += a * b` over strided views; `a` is `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strided,
    b: &[f64],
    sb: Strided,
    c: &mut [f64],
    sc: Strided,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    if m < SHORT_ROWS && n > m {
        return gemm_strided(n, k, m, b, sb.t(), a, sa.t(), c, sc.t());
    }
    assert!(sa.last(m, k) < a.len() && sb.last(k, n) < b.len() && sc.last(m, n) < c.len());
    // SAFETY: the asserts bound the largest index reachable through each
    // view; `c` is a distinct mutable slice so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(sa.offset),
            sa.rs as isize,
            sa.cs as isize,
            b.as_ptr().add(sb.offset),
            sb.rs as isize,
            sb.cs as isize,
            1.0,
            c.as_mut_ptr().add(sc.offset),
            sc.rs as isize,
            sc.cs as isize,
        );
    }
}

/// Copies `channels` planes of `h x w` into zero-padded planes.
fn pad_image(g: &ConvGeometry, img: &[f64], channels: usize, out: &mut [f64]) {
    let (ph, px) = (g.kh / 2, g.kw / 2);
    let (pw, plane, hw) = (g.pw(), g.plane(), g.hw());
    out.fill(0.0);
    for c in 0..channels {
        for i in 0..g.h {
            let src = &img[c * hw + i * g.w..c * hw + (i + 1) * g.w];
            let at = c * plane + (i + ph) * pw + px;
            out[at..at + g.w].copy_from_slice(src);
        }
    }
}

/// Drops the junk columns of a padded-width result.
fn crop(g: &ConvGeometry, wide: &[f64], channels: usize, out: &mut [f64]) {
    let (pw, span, hw) = (g.pw(), g.span(), g.hw());
    for c in 0..channels {
        for i in 0..g.h {
            let at = c * span + i * pw;
            out[c * hw + i * g.w..c * hw + (i + 1) * g.w].copy_from_slice(&wide[at..at + g.w]);
        }
    }
}

// Below this many source channels the taps are gathered into one
// contraction instead of one GEMM per tap.
const FEW_CHANNELS: usize = 16;

/// Rows `(s, tap)` of shifted source planes, each `span` long.
fn gather_taps(g: &ConvGeometry, src: &[f64], channels: usize, cols: &mut Vec<f64>) {
    let (pw, plane, span, taps) = (g.pw(), g.plane(), g.span(), g.taps());
    cols.resize(channels * taps * span, 0.0);
    for s in 0..channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (s * taps + ky * g.kw + kx) * span;
                let at = s * plane + ky * pw + kx;
                cols[row..row + span].copy_from_slice(&src[at..at + span]);
            }
        }
    }
}

/// `dst += wmat (*) src` in padded-width layout, where `src` holds padded
/// planes and `wmat` is `dst_ch x (src_ch * taps)` row-major. In that layout
/// a spatial shift is a flat offset into `src`.
fn correlate(
    g: &ConvGeometry,
    src: &[f64],
    src_ch: usize,
    wmat: &[f64],
    dst_ch: usize,
    dst: &mut [f64],
    cols: &mut Vec<f64>,
) {
    let (pw, plane, span, taps) = (g.pw(), g.plane(), g.span(), g.taps());
    if src_ch < FEW_CHANNELS {
        gather_taps(g, src, src_ch, cols);
        let k = src_ch * taps;
        gemm_strided(
            dst_ch,
            k,
            span,
            wmat,
            Strided::new(0, k, 1),
            cols,
            Strided::new(0, span, 1),
            dst,
            Strided::new(0, span, 1),
        );
        return;
    }
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            gemm_strided(
                dst_ch,
                src_ch,
                span,
                wmat,
                Strided::new(ky * g.kw + kx, src_ch * taps, taps),
                src,
                Strided::new(ky * pw + kx, plane, 1),
                dst,
                Strided::new(0, span, 1),
            );
        }
    }
}

fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = g.hw();
    let in_size = g.in_ch * hw;
    let out_size = g.out_ch * hw;
    let mut y = vec![0.0; g.batch * out_size];
    if g.is_pointwise() {
        for b in 0..g.batch {
            let xb = &x[b * in_size..(b + 1) * in_size];
            let yb = &mut y[b * out_size..(b + 1) * out_size];
            for (o, chunk) in yb.chunks_mut(hw).enumerate() {
                chunk.fill(bias[o]);
            }
            gemm(g.out_ch, g.in_ch, hw, w, false, xb, false, yb, 1.0);
        }
        return y;
    }
    let span = g.span();
    let mut xpad = vec![0.0; g.in_ch * g.plane()];
    let mut wide = vec![0.0; g.out_ch * span];
    let mut cols = Vec::new();
    for b in 0..g.batch {
        pad_image(g, &x[b * in_size..(b + 1) * in_size], g.in_ch, &mut xpad);
        for (o, chunk) in wide.chunks_mut(span).enumerate() {
            chunk.fill(bias[o]);
        }
        correlate(g, &xpad, g.in_ch, w, g.out_ch, &mut wide, &mut cols);
        crop(g, &wide, g.out_ch, &mut y[b * out_size..(b + 1) * out_size]);
    }
    y
}

fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = g.hw();
    let in_size = g.in_ch * hw;
    let out_size = g.out_ch * hw;
    let mut gx = vec![0.0; g.batch * in_size];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_ch];
    for b in 0..g.batch {
        let gyb = &gy[b * out_size..(b + 1) * out_size];
        for (o, chunk) in gyb.chunks(hw).enumerate() {
            gb[o] += chunk.iter().sum::<f64>();
        }
    }
    if g.is_pointwise() {
        for b in 0..g.batch {
            let xb = &x[b * in_size..(b + 1) * in_size];
            let gyb = &gy[b * out_size..(b + 1) * out_size];
            let gxb = &mut gx[b * in_size..(b + 1) * in_size];
            gemm(g.out_ch, hw, g.in_ch, gyb, false, xb, true, &mut gw, 1.0);
            gemm(g.in_ch, g.out_ch, hw, w, true, gyb, false, gxb, 0.0);
        }
        return (gx, gw, gb);
    }
    let (pw, plane, span, taps) = (g.pw(), g.plane(), g.span(), g.taps());
    // input gradient = correlation of padded gy with the flipped, transposed
    // kernel
    let mut wflip = vec![0.0; w.len()];
    for o in 0..g.out_ch {
        for i in 0..g.in_ch {
            for t in 0..taps {
                wflip[(i * g.out_ch + o) * taps + (taps - 1 - t)] = w[(o * g.in_ch + i) * taps + t];
            }
        }
    }
    let mut xpad = vec![0.0; g.in_ch * plane];
    let mut gypad = vec![0.0; g.out_ch * plane];
    let mut gy_wide = vec![0.0; g.out_ch * span];
    let mut gx_wide = vec![0.0; g.in_ch * span];
    let mut cols = Vec::new();
    for b in 0..g.batch {
        let gyb = &gy[b * out_size..(b + 1) * out_size];
        pad_image(g, &x[b * in_size..(b + 1) * in_size], g.in_ch, &mut xpad);
        pad_image(g, gyb, g.out_ch, &mut gypad);
        // gy in padded-width layout with zeroed junk columns
        for o in 0..g.out_ch {
            for i in 0..g.h {
                let row = &mut gy_wide[o * span + i * pw..o * span + (i + 1) * pw];
                row[..g.w].copy_from_slice(&gyb[o * hw + i * g.w..o * hw + (i + 1) * g.w]);
                row[g.w..].fill(0.0);
            }
        }
        if g.in_ch < FEW_CHANNELS {
            gather_taps(g, &xpad, g.in_ch, &mut cols);
            gemm_strided(
                g.out_ch,
                span,
                g.in_ch * taps,
                &gy_wide,
                Strided::new(0, span, 1),
                &cols,
                Strided::new(0, 1, span),
                &mut gw,
                Strided::new(0, g.in_ch * taps, 1),
            );
        } else {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    gemm_strided(
                        g.out_ch,
                        span,
                        g.in_ch,
                        &gy_wide,
                        Strided::new(0, span, 1),
                        &xpad,
                        Strided::new(ky * pw + kx, 1, plane),
                        &mut gw,
                        Strided::new(ky * g.kw + kx, g.in_ch * taps, taps),
                    );
                }
            }
        }
        gx_wide.fill(0.0);
        correlate(g, &gypad, g.out_ch, &wflip, g.in_ch, &mut gx_wide, &mut cols);
        crop(g, &gx_wide, g.in_ch, &mut gx[b * in_size..(b + 1) * in_size]);
    }
    (gx, gw, gb)
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (parameter index, flat entry) of the worst entry.
    pub worst: (usize, usize),
}

/// Compares tape gradients of `loss_fn` against central finite differences.
///
/// `loss_fn` receives the tape and one leaf per parameter and must return a
/// single-element loss. The relative error of each entry uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(loss_fn: F, params: &[Tensor], epsilon: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(TensorError::InvalidArgument(format!(
            "epsilon must lie in (0, 1e-3], got {epsilon}"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = loss_fn(&tape, &vars)?;
        if loss.value().numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        Ok(loss.value().item())
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = loss_fn(&tape, &leaves)?;
        let grads = tape.backward(&loss)?;
        leaves.iter().map(|l| grads.wrt(l)).collect()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for e in 0..grad.numel() {
            let orig = work[pi].data[e];
            work[pi].data[e] = orig + epsilon;
            let plus = eval(&work)?;
            work[pi].data[e] = orig - epsilon;
            let minus = eval(&work)?;
            work[pi].data[e] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data[e];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > result.max_rel_error {
                result = GradCheck {
                    max_rel_error: rel,
                    worst: (pi, e),
                };
            }
        }
    }
    Ok(result)
}
