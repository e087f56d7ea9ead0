//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Exactly the operations the segmentation network needs: 3x3 convolution,
//! group normalization, ReLU/sigmoid, 2x2 max-pooling, x2 bilinear
//! upsampling, channel concatenation, binary cross-entropy, plus Adam and a
//! binary checkpoint format. Values are `f32` in production; every op is
//! generic over [`Element`] so gradient checks can run in `f64`.
//!
//! Autodiff is tape-based with a single-use tape: each tensor produced while
//! gradients are enabled carries its backward step, [`backward`] consumes
//! those steps in reverse topological order (each node visited exactly
//! once), and a second `backward` from the same loss is an error. Tensors
//! are immutable after creation except for gradient accumulation, so a
//! recorded graph may be read from other threads but backward is confined to
//! the thread that built it.

mod adam;
mod checkpoint;
mod ops;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ops::{
    bce_loss, concat_channels, conv2d, group_norm, maxpool2, relu, scale, sigmoid, sum,
    upsample_bilinear2, BCE_CLAMP,
};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

/// Scalar type the engine runs on. `f32` for parameters and activations,
/// `f64` for finite-difference test headroom.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Row/column-stride GEMM `C := alpha * A(m,k) * B(k,n) + beta * C(m,n)`.
    ///
    /// # Safety
    /// Pointers must cover the strided index ranges implied by `m`, `k`, `n`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("backward already ran on this tape; rebuild the graph to differentiate again")]
    TapeConsumed,
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T, TensorError> {
    Err(TensorError::Shape(msg.into()))
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Runs `f` with gradient recording disabled on this thread. Ops executed
/// inside produce detached tensors and no tape, which keeps inference from
/// retaining activations.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_ENABLED.with(|g| {
        let prev = g.replace(false);
        let out = f();
        g.set(prev);
        out
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward step recorded for one op output: the parent tensors and a
/// closure that routes the output gradient into them. Consumed on use.
struct Node<E: Element> {
    parents: Vec<Tensor<E>>,
    step: Box<dyn FnOnce(&[E], &[Tensor<E>])>,
}

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    node: RefCell<Option<Node<E>>>,
    backward_done: Cell<bool>,
}

/// Dense tensor with shared immutable storage. Cloning is cheap (reference
/// count); gradients accumulate into an interior store.
pub struct Tensor<E: Element = f32> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    fn new(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, node: Option<Node<E>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node: RefCell::new(node),
                backward_done: Cell::new(false),
            }),
        }
    }

    /// Leaf tensor that does not take gradients.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return shape_err(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Tensor::new(shape.to_vec(), data, false, None))
    }

    /// Leaf parameter: gradients accumulate here during backward.
    pub fn param(shape: &[usize], data: Vec<E>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return shape_err(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Tensor::new(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![E::zero(); n], false, None)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n], false, None)
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(value: E) -> Self {
        Tensor::new(vec![], vec![value], false, None)
    }

    pub(crate) fn result(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: &[&Tensor<E>],
        step: Option<Box<dyn FnOnce(&[E], &[Tensor<E>])>>,
    ) -> Self {
        let record = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = if record {
            step.map(|step| Node {
                parents: parents.iter().map(|p| (*p).clone()).collect(),
                step,
            })
        } else {
            None
        };
        Tensor::new(shape, data, record, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    /// Removes and returns the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow_mut().take()
    }

    /// Detached view sharing the same storage, outside any tape.
    pub fn detach(&self) -> Self {
        Tensor::new(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [E])) {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![E::zero(); self.len()]);
        f(buf);
    }

    fn id(&self) -> u64 {
        self.inner.id
    }
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// `requires_grad` tensor that participated in the recorded computation.
/// Each recorded step is taken off the tape as it runs, so the graph is
/// traversed exactly once and a repeat call fails with
/// [`TensorError::TapeConsumed`].
pub fn backward<E: Element>(loss: &Tensor<E>) -> Result<(), TensorError> {
    if loss.len() != 1 {
        return Err(TensorError::NonScalarBackward(loss.shape().to_vec()));
    }
    if loss.inner.backward_done.get() {
        return Err(TensorError::TapeConsumed);
    }
    loss.inner.backward_done.set(true);

    // Reverse postorder over parent edges = topological order: every tensor
    // has received all gradient contributions before its own step runs.
    let order = topo_order(loss);
    loss.accumulate_grad(|g| g[0] += E::one());
    for t in order {
        let node = t.inner.node.borrow_mut().take();
        if let Some(node) = node {
            let grad = t
                .inner
                .grad
                .borrow()
                .clone()
                .unwrap_or_else(|| vec![E::zero(); t.len()]);
            (node.step)(&grad, &node.parents);
            if !t.inner.requires_grad {
                // interior tensors only relay gradient
                t.inner.grad.borrow_mut().take();
            }
        }
    }
    Ok(())
}

fn topo_order<E: Element>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (tensor, children_expanded)
    let mut stack: Vec<(Tensor<E>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.inner.node.borrow().as_ref() {
            for p in &node.parents {
                if !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order.reverse();
    order
}
