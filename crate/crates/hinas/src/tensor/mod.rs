//! Flat-buffer NCHW tensors recorded on a Wengert tape.
//!
//! A [`Tensor`] is an immutable value: reference-counted storage plus a
//! `(n, c, h, w)` shape. Every operation appends a node to the [`Tape`] whose
//! closure routes the vector-Jacobian product to the operation's inputs.
//! Node ids are assigned in construction order, so walking the tape backwards
//! is a valid topological order for reverse-mode differentiation.
//!
//! Leaves are [`Param`]s: named, persistent buffers that accumulate gradients
//! across backward passes (sum semantics) until explicitly zeroed. Vectors
//! (architecture weights) and scalars are carried as `(1, c, 1, 1)` and
//! `(1, 1, 1, 1)` tensors so the whole stack needs exactly one layout.

pub mod gradcheck;
pub mod kernels;
pub mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::TensorError;
use crate::scalar::Scalar;

// ── Shape ────────────────────────────────────────────────────────────────────

/// NCHW extents. All tensors in the crate are 4-d; lower-rank data uses
/// size-1 axes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// A `(1, c, 1, 1)` vector, used for architecture weights and biases.
    pub fn vec(c: usize) -> Self {
        Shape::new(1, c, 1, 1)
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements per batch item.
    pub fn chw(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

// ── Tensor ───────────────────────────────────────────────────────────────────

pub type NodeId = usize;

/// Immutable tensor value. Cloning is cheap (shared storage); `node` ties the
/// value to the tape that produced it, `None` for constants and inference
/// results.
#[derive(Clone)]
pub struct Tensor<F: Scalar> {
    data: Rc<Vec<F>>,
    shape: Shape,
    node: Option<NodeId>,
}

impl<F: Scalar> Tensor<F> {
    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Whether gradients flow through this tensor.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same storage, detached from the tape.
    pub fn detach(&self) -> Tensor<F> {
        Tensor { data: Rc::clone(&self.data), shape: self.shape, node: None }
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor {}", self.shape);
        self.data[0]
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} tracked={}", self.shape, self.node.is_some())
    }
}

// ── Param ────────────────────────────────────────────────────────────────────

struct ParamInner<F: Scalar> {
    name: String,
    shape: Shape,
    value: Rc<Vec<F>>,
    grad: Vec<F>,
}

/// Named trainable leaf. The value is shared copy-on-write with any tensors
/// created from it, so optimizer updates after a step (when the tape has been
/// dropped) mutate in place.
pub struct Param<F: Scalar> {
    inner: Rc<RefCell<ParamInner<F>>>,
}

impl<F: Scalar> Clone for Param<F> {
    fn clone(&self) -> Self {
        Param { inner: Rc::clone(&self.inner) }
    }
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, shape: Shape, value: Vec<F>) -> Self {
        assert_eq!(value.len(), shape.numel(), "param value length mismatches shape");
        let n = value.len();
        Param {
            inner: Rc::new(RefCell::new(ParamInner {
                name: name.into(),
                shape,
                value: Rc::new(value),
                grad: vec![F::zero(); n],
            })),
        }
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn shape(&self) -> Shape {
        self.inner.borrow().shape
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().value.len()
    }

    /// Identity comparison; two handles aliasing one buffer share training.
    pub fn ptr_eq(a: &Param<F>, b: &Param<F>) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    pub fn value(&self) -> Vec<F> {
        self.inner.borrow().value.as_ref().clone()
    }

    pub fn set_value(&self, value: Vec<F>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(value.len(), inner.value.len(), "param {}: set_value length mismatch", inner.name);
        inner.value = Rc::new(value);
    }

    /// In-place update of the value; copies only if a tensor from an earlier
    /// step still holds the buffer.
    pub fn update_value(&self, f: impl FnOnce(&mut [F], &[F])) {
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        let value: &mut Vec<F> = Rc::make_mut(&mut inner.value);
        f(value, &inner.grad);
    }

    pub fn grad(&self) -> Vec<F> {
        self.inner.borrow().grad.clone()
    }

    /// Reads the gradient without cloning it.
    pub fn with_grad<R>(&self, f: impl FnOnce(&[F]) -> R) -> R {
        f(&self.inner.borrow().grad)
    }

    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().grad.iter_mut() {
            *g = F::zero();
        }
    }

    /// Multiplies the accumulated gradient by `s` in place.
    pub fn scale_grad(&self, s: F) {
        for g in self.inner.borrow_mut().grad.iter_mut() {
            *g *= s;
        }
    }

    fn accumulate_grad(&self, g: &[F]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), inner.grad.len());
        for (dst, &src) in inner.grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    /// Registers the parameter as a leaf on `tape` and returns its value as a
    /// tensor. Gradients reaching the leaf accumulate into the parameter.
    pub fn leaf(&self, tape: &mut Tape<F>) -> Tensor<F> {
        let (data, shape) = {
            let inner = self.inner.borrow();
            (Rc::clone(&inner.value), inner.shape)
        };
        let node = if tape.recording {
            let p = self.clone();
            Some(tape.push_node(Box::new(move |g, _ctx| p.accumulate_grad(g))))
        } else {
            None
        };
        Tensor { data, shape, node }
    }
}

impl<F: Scalar> fmt::Debug for Param<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(f, "Param[{}]{}", inner.name, inner.shape)
    }
}

// ── Tape ─────────────────────────────────────────────────────────────────────

/// Gradient routing context handed to backward closures.
pub struct BackCtx<'a, F: Scalar> {
    grads: &'a mut [Option<Vec<F>>],
    scratch: &'a mut Vec<F>,
}

impl<F: Scalar> BackCtx<'_, F> {
    /// Runs `f` on the (zero-initialized on first touch) gradient buffer of
    /// `node`; `f` must accumulate, not overwrite.
    pub fn with_grad(&mut self, node: NodeId, len: usize, f: impl FnOnce(&mut [F])) {
        let buf = self.grads[node].get_or_insert_with(|| vec![F::zero(); len]);
        debug_assert_eq!(buf.len(), len);
        f(buf);
    }

    /// Reusable scratch buffer of at least `len` elements (contents arbitrary).
    pub fn take_scratch(&mut self, len: usize) -> Vec<F> {
        let mut buf = std::mem::take(self.scratch);
        if buf.len() < len {
            buf.resize(len, F::zero());
        }
        buf
    }

    pub fn put_scratch(&mut self, buf: Vec<F>) {
        if buf.len() > self.scratch.len() {
            *self.scratch = buf;
        }
    }
}

type BackwardFn<F> = Box<dyn FnOnce(&[F], &mut BackCtx<F>)>;

struct Node<F: Scalar> {
    back: Option<BackwardFn<F>>,
}

/// Running totals of forward activations allocated on a tape; the element
/// count is the memory proxy used to compare execution strategies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    pub tensors: usize,
    pub elements: usize,
}

/// Append-only record of one forward pass.
///
/// `backward` walks the nodes in reverse construction order exactly once,
/// then clears the tape; activations captured by closures are released as the
/// walk passes them.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    recording: bool,
    stats: TapeStats,
    scratch: Vec<F>,
}

impl<F: Scalar> Tape<F> {
    /// A recording tape for training.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true, stats: TapeStats::default(), scratch: Vec::new() }
    }

    /// A non-recording tape: ops run forward-only and produce untracked
    /// tensors (no backward possible).
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), recording: false, stats: TapeStats::default(), scratch: Vec::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    fn push_node(&mut self, back: BackwardFn<F>) -> NodeId {
        self.nodes.push(Node { back: Some(back) });
        self.nodes.len() - 1
    }

    /// Wraps freshly computed data as a tensor, counting it as an activation.
    /// No tape node is created; use for constants and op outputs that are
    /// registered separately.
    pub fn constant(&mut self, data: Vec<F>, shape: Shape) -> Tensor<F> {
        assert_eq!(data.len(), shape.numel(), "data length mismatches shape {shape}");
        self.stats.tensors += 1;
        self.stats.elements += data.len();
        Tensor { data: Rc::new(data), shape, node: None }
    }

    /// Records an op output. The closure receives the output gradient and
    /// routes contributions to the op's inputs; it is stored only while
    /// recording and only if `tracked` (some input requires grad).
    pub fn record(
        &mut self,
        data: Vec<F>,
        shape: Shape,
        tracked: bool,
        back: impl FnOnce(&[F], &mut BackCtx<F>) + 'static,
    ) -> Tensor<F> {
        let mut out = self.constant(data, shape);
        if self.recording && tracked {
            out.node = Some(self.push_node(Box::new(back)));
        }
        out
    }

    /// Re-tags an existing tensor (aliased storage, e.g. identity ops) with a
    /// new node. Does not count a new activation.
    pub fn record_alias(
        &mut self,
        src: &Tensor<F>,
        back: impl FnOnce(&[F], &mut BackCtx<F>) + 'static,
    ) -> Tensor<F> {
        let node = if self.recording && src.node.is_some() {
            Some(self.push_node(Box::new(back)))
        } else {
            None
        };
        Tensor { data: Rc::clone(&src.data), shape: src.shape, node }
    }

    /// Reusable scratch buffer of at least `len` elements (contents arbitrary).
    pub fn take_scratch(&mut self, len: usize) -> Vec<F> {
        let mut buf = std::mem::take(&mut self.scratch);
        if buf.len() < len {
            buf.resize(len, F::zero());
        }
        buf
    }

    pub fn put_scratch(&mut self, buf: Vec<F>) {
        if buf.len() > self.scratch.len() {
            self.scratch = buf;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Visits every node at most once
    /// in reverse topological order, accumulates leaf gradients into their
    /// `Param`s, and clears the tape.
    pub fn backward(&mut self, loss: &Tensor<F>) -> Result<(), TensorError> {
        assert_eq!(loss.len(), 1, "backward requires a scalar loss, got {}", loss.shape);
        let Some(root) = loss.node else {
            return Err(TensorError::NotTracked);
        };
        if root >= self.nodes.len() {
            return Err(TensorError::TapeConsumed);
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![F::one()]);
        let mut scratch = Vec::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = self.nodes[id].back.take() {
                let mut ctx = BackCtx { grads: &mut grads, scratch: &mut scratch };
                back(&g, &mut ctx);
            }
        }
        self.nodes.clear();
        Ok(())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Tape::new()
    }
}
