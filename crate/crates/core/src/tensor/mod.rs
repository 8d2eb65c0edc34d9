//! Reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Operations on tensors
//! that require gradients record a node holding the parent handles and a
//! backward closure; [`Tensor::backward`] walks that graph in reverse
//! topological order. Graphs are `!Send`: a graph lives on the thread that
//! built it, and cross-thread work exchanges plain `Vec<f32>` snapshots.
//!
//! Values are held in `f64` buffers but every op rounds its outputs (and
//! every backward step its gradients) to the nearest `f32`, so results are
//! those of 32-bit arithmetic with wide accumulators. The rounding can be
//! lifted on the current thread with [`with_wide_precision`]; the
//! finite-difference checker uses that to evaluate its reference objective.
//!
//! Gradients accumulate into leaf tensors (tensors created directly rather
//! than produced by an op) until [`Tensor::zero_grad`] is called. A leaf used
//! by several ops, e.g. a weight shared across branches, receives the sum of
//! every path's contribution.

mod checkpoint;
mod conv;
mod gradcheck;
mod linalg;
mod norm;
mod ops;
mod optim;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::hash::{DefaultHasher, Hasher};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use conv::{conv_output_extent, set_conv_backward_fault};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, Precision, REFINE_STEPS};
pub use optim::{adamw_update, AdamW, AdamWConfig, OptimizerState};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static WIDE: Cell<bool> = const { Cell::new(false) };
    static BRANCH_LOG: RefCell<Option<DefaultHasher>> = const { RefCell::new(None) };
}

/// Runs `f` while hashing every branch decision taken by piecewise ops
/// (ReLU and clamp masks, max-pool winners). Two evaluations with equal
/// signatures stayed on the same smooth piece.
pub fn with_branch_signature<R>(f: impl FnOnce() -> R) -> (R, u64) {
    struct Restore(Option<DefaultHasher>);
    impl Drop for Restore {
        fn drop(&mut self) {
            BRANCH_LOG.with(|l| *l.borrow_mut() = self.0.take());
        }
    }
    let _restore = Restore(BRANCH_LOG.with(|l| l.borrow_mut().replace(DefaultHasher::new())));
    let out = f();
    let sig = BRANCH_LOG.with(|l| l.borrow().as_ref().map_or(0, Hasher::finish));
    (out, sig)
}

pub(crate) fn log_branches(f: impl FnOnce(&mut DefaultHasher)) {
    BRANCH_LOG.with(|l| {
        if let Some(h) = l.borrow_mut().as_mut() {
            f(h);
        }
    });
}

/// Runs `f` with op outputs kept at full `f64` precision on this thread.
pub fn with_wide_precision<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            WIDE.with(|w| w.set(self.0));
        }
    }
    let _restore = Restore(WIDE.with(|w| w.replace(true)));
    f()
}

pub fn is_wide_precision() -> bool {
    WIDE.with(|w| w.get())
}

/// Rounds every value to the nearest `f32` unless wide precision is active.
pub(crate) fn round32(values: &mut [f64]) {
    if !is_wide_precision() {
        values.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Runs `f` without recording any autodiff graph on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Gradient contributions for each parent, in parent order.
pub(crate) type ParentGrads = Vec<Option<Vec<f64>>>;

type BackwardFn = Box<dyn Fn(&Tensor, &[f64]) -> ParentGrads>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn widen(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    /// Creates a constant tensor. Fails if `data` does not fill `shape`.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(data.len(), shape)?;
        Ok(Self::build(shape.to_vec(), widen(&data), false, None))
    }

    /// Creates a trainable leaf tensor.
    pub fn parameter(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(data.len(), shape)?;
        Ok(Self::build(shape.to_vec(), widen(&data), true, None))
    }

    fn check_shape(len: usize, shape: &[usize]) -> Result<()> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("new", format!("zero extent in shape {shape:?}")));
        }
        if numel_of(shape) != len {
            return Err(Error::dim(
                "new",
                format!("{len} values do not fill shape {shape:?}"),
            ));
        }
        Ok(())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel_of(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::build(shape.to_vec(), vec![value as f64; numel_of(shape)], false, None)
    }

    pub fn scalar(value: f32) -> Self {
        Self::build(vec![1], vec![value as f64], false, None)
    }

    /// Samples i.i.d. `N(0, std^2)` values.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        let data = (0..numel_of(shape)).map(|_| dist.sample(rng) as f64).collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    /// Returns a new leaf with the same values that tracks gradients.
    pub fn requiring_grad(&self) -> Self {
        Self::build(self.0.shape.clone(), self.data().clone(), true, None)
    }

    /// Returns a new constant leaf with the same values.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.data().clone(), false, None)
    }

    /// Records an op result, rounding `data` to `f32`. The node is kept only
    /// when gradients are enabled and some parent requires them.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&Tensor, &[f64]) -> ParentGrads + 'static,
    ) -> Self {
        round32(&mut data);
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = track.then(|| Node {
            op,
            parents,
            backward: Box::new(backward),
        });
        Self::build(shape, data, track, node)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the op that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub(crate) fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutating a tensor that is part of a live graph invalidates that
    /// graph's gradients.
    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().iter().map(|&v| v as f32).collect()
    }

    /// Overwrites the values in place (optimizer updates, checkpoint loads).
    pub fn assign(&self, values: &[f32]) -> Result<()> {
        let mut data = self.0.data.borrow_mut();
        if values.len() != data.len() {
            return Err(Error::dim(
                "assign",
                format!("{} values for shape {:?}", values.len(), self.shape()),
            ));
        }
        data.iter_mut().zip(values).for_each(|(d, &v)| *d = v as f64);
        Ok(())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        Ok(self.item_f64()? as f32)
    }

    /// Value of a single-element tensor without narrowing; differs from
    /// [`Tensor::item`] only under [`with_wide_precision`].
    pub fn item_f64(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| g.iter().map(|&v| v as f32).collect())
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Accumulates gradients of this scalar into every reachable leaf that
    /// requires them. Repeated calls without [`Tensor::zero_grad`] add up.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward() on a tensor that does not require gradients".into(),
            ));
        }

        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.0.node {
                Some(node) => {
                    let grads = (node.backward)(t, &g);
                    debug_assert_eq!(grads.len(), node.parents.len(), "{}", node.op);
                    for (parent, pg) in node.parents.iter().zip(grads) {
                        let Some(mut pg) = pg else { continue };
                        round32(&mut pg);
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "{}", node.op);
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => {
                                acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
                                round32(acc);
                            }
                            None => {
                                pending.insert(parent.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => {
                            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                            round32(acc);
                        }
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Tensors reachable from `self` that require gradients, parents before
    /// children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
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
    fn sum_gives_ones() {
        let x = Tensor::parameter(vec![1.0, -2.0, 3.0, 0.5, 7.0, 1.0], &[2, 3]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.scale(3.0).sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_use_sums_paths() {
        // y = x*x + 3x used through two branches of the graph
        let x = Tensor::parameter(vec![0.5, -1.5, 2.0], &[3]).unwrap();
        let a = x.mul(&x).unwrap();
        let b = x.scale(3.0);
        a.add(&b).unwrap().sum().backward().unwrap();
        let g = x.grad().unwrap();
        // clone-based oracle: gradients of each path computed on separate leaves
        let x1 = x.requiring_grad();
        x1.mul(&x1).unwrap().sum().backward().unwrap();
        let x2 = x.requiring_grad();
        x2.scale(3.0).sum().backward().unwrap();
        let expect: Vec<f32> = x1
            .grad()
            .unwrap()
            .iter()
            .zip(x2.grad().unwrap())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(g, expect);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::parameter(vec![1.0], &[1]).unwrap();
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
        assert!(is_grad_enabled());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::new(vec![], &[0, 3]).is_err());
        assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
    }
}
