use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::element::Element;
use crate::error::{Result, TensorError};

/// Backward rule of a recorded operation.
///
/// Receives the operation's inputs, its forward output and the gradient
/// flowing into that output; returns one optional gradient per input, each
/// with the input's element count. `None` means "no contribution".
pub type BackwardFn<T> = Box<dyn Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Element> {
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    op: Option<&'static str>,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// Dense row-major tensor with optional autodiff lineage.
///
/// Cloning is cheap: clones share storage and lineage. Data is immutable once
/// the tensor exists; only the gradient slot of a leaf changes, and only
/// during [`Tensor::backward`].
pub struct Tensor<T: Element>(Arc<Inner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if let Some(op) = self.0.op {
            s.field("op", &op);
        }
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables lineage recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Inference mode: operations executed while the guard lives record no
/// inputs or backward rules, so intermediates are freed eagerly.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn from_inner(inner: Inner<T>) -> Self {
        Tensor(Arc::new(inner))
    }

    /// Leaf tensor from row-major data.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel_of(shape) {
            return Err(TensorError::DataLength { len: data.len(), shape: shape.to_vec() });
        }
        Ok(Self::leaf(Arc::new(data), shape.to_vec(), false))
    }

    fn leaf(data: Arc<Vec<T>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Self::from_inner(Inner { shape, data, requires_grad, op: None, grad: Mutex::new(None), node: None })
    }

    pub fn from_slice(data: &[T], shape: &[usize]) -> Result<Self> {
        Self::new(data.to_vec(), shape)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(Arc::new(vec![value; numel_of(shape)]), shape.to_vec(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel_of(shape)).map(&mut f).collect();
        Self::leaf(Arc::new(data), shape.to_vec(), false)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    /// Returns a trainable leaf sharing this tensor's data.
    pub fn requires_grad(self) -> Self {
        Self::leaf(Arc::clone(&self.0.data), self.0.shape.clone(), true)
    }

    /// Leaf copy without lineage that shares storage.
    pub fn detach(&self) -> Self {
        Self::leaf(Arc::clone(&self.0.data), self.0.shape.clone(), false)
    }

    /// Output of an operation.
    ///
    /// Lineage (inputs + backward rule) is kept only when gradient recording
    /// is enabled and at least one input participates in differentiation;
    /// the operation tag is always recorded.
    pub fn from_op(
        op: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), numel_of(&shape), "{op}: output length");
        Self::from_op_shared(op, Arc::new(data), shape, inputs, backward)
    }

    pub(crate) fn from_op_shared(
        op: &'static str,
        data: Arc<Vec<T>>,
        shape: Vec<usize>,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.tracks_grad());
        let node =
            track.then(|| Node { inputs: inputs.iter().map(|t| (*t).clone()).collect(), backward: Box::new(backward) });
        Self::from_inner(Inner { shape, data, requires_grad: false, op: Some(op), grad: Mutex::new(None), node })
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub(crate) fn storage(&self) -> &Arc<Vec<T>> {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { op: "item", shape: self.shape().to_vec() });
        }
        Ok(self.0.data[0])
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn is_trainable(&self) -> bool {
        self.0.requires_grad
    }

    /// True when gradients flow through this tensor.
    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad || self.0.node.is_some()
    }

    /// Tag of the operation that produced this tensor; `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op
    }

    /// Recorded inputs (empty for leaves and untracked outputs).
    pub fn inputs(&self) -> &[Tensor<T>] {
        self.0.node.as_ref().map_or(&[], |n| n.inputs.as_slice())
    }

    pub fn ptr_eq(a: &Self, b: &Self) -> bool {
        Arc::ptr_eq(&a.0, &b.0)
    }

    fn key(&self) -> *const Inner<T> {
        Arc::as_ptr(&self.0)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    /// Gradient as a tensor of this tensor's shape.
    pub fn grad_tensor(&self) -> Option<Tensor<T>> {
        self.grad().map(|g| Self::leaf(Arc::new(g), self.0.shape.clone(), false))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a one-element tensor.
    ///
    /// Gradients of trainable leaves are accumulated into their slots, so a
    /// leaf reached along several paths (or over several calls) receives the
    /// sum of all contributions.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { op: "backward", shape: self.shape().to_vec() });
        }
        if !self.tracks_grad() {
            return Err(TensorError::Domain {
                op: "backward",
                detail: "tensor has no lineage and is not trainable".into(),
            });
        }

        let order = self.topo_order();
        let mut grads: HashMap<*const Inner<T>, Vec<T>> = HashMap::new();
        grads.insert(self.key(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            match &t.0.node {
                Some(node) => {
                    let input_grads = (node.backward)(&node.inputs, &t.0.data, &g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.tracks_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "{:?} grad length", t.0.op);
                        match grads.get_mut(&input.key()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(input.key(), ig);
                            }
                        }
                    }
                }
                None => {
                    if t.0.requires_grad {
                        t.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` (inputs before consumers).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            for input in t.inputs() {
                if input.tracks_grad() && !visited.contains(&input.key()) {
                    stack.push((input.clone(), false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_invariants() {
        let t = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(t.is_leaf());
        assert!(t.inputs().is_empty());
        assert!(t.grad().is_none());
        assert!(Tensor::<f32>::new(vec![1.0; 5], &[2, 3]).is_err());
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = Tensor::scalar(2.5f32);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::<f64>::ones(&[3]).requires_grad();
        assert!(matches!(t.backward(), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn no_grad_drops_lineage() {
        let x = Tensor::<f64>::ones(&[3]).requires_grad();
        let y = {
            let _g = no_grad();
            x.scale(2.0)
        };
        assert_eq!(y.op_name(), Some("scale"));
        assert!(y.inputs().is_empty());
        assert!(is_grad_enabled());
        assert!(x.scale(2.0).tracks_grad());
    }
}
