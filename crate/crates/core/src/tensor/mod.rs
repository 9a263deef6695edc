//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The graph is define-by-run: every operation on tensors that require
//! gradients records its inputs and a backward closure on the output tensor.
//! Calling [`Tensor::backward`] on a scalar loss walks the recorded graph in
//! reverse topological order and accumulates gradients additively, so fan-out
//! (a tensor consumed by several ops) just works.
//!
//! All values are `f64`. Desk-scale models are small enough that the extra
//! width costs little, and finite-difference verification needs the headroom.

mod ops;

pub mod gradcheck;

pub use ops::{attention_weights, context_positions, Padding};
pub(crate) use ops::{mm, mm_nt, mm_tn};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Train/infer switch for mode-dependent ops (dropout, batch norm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Arguments handed to an op's backward closure.
pub(crate) struct BackwardArgs<'a> {
    pub out_values: &'a [f64],
    pub out_grad: &'a [f64],
    pub parents: &'a [Tensor],
}

/// Returns one gradient contribution per parent, aligned with the parents
/// list. An empty vec means "nothing flows to this parent".
pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs) -> Vec<Vec<f64>>>;

struct Inner {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
    backward_done: bool,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases the same
/// storage, which is how parameters appear as leaves in many graphs.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != values.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                values.len()
            )));
        }
        Ok(Self::raw(shape, values))
    }

    pub(crate) fn raw(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                values,
                grad: None,
                requires_grad: false,
                parents: Vec::new(),
                backward_fn: None,
                backward_done: false,
            })),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::raw(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![1], vec![v])
    }

    /// Build a 2-D tensor from rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("from_rows: ragged rows".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            values.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], values)
    }

    /// Marks this tensor as a differentiation leaf and returns it.
    pub fn requires_grad(self) -> Self {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    /// Copy of the stored values.
    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub(crate) fn values_ref(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.values.as_slice())
    }

    /// Read access without cloning.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().values)
    }

    /// In-place mutation of the stored values (optimizer steps, constraint
    /// projections). Must not be called on tensors that are part of a live
    /// graph still awaiting backward.
    pub fn with_values_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.inner.borrow_mut().values)
    }

    /// Replace the stored values wholesale. Shape must be preserved.
    pub fn set_values(&self, values: Vec<f64>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if values.len() != inner.values.len() {
            return Err(Error::Contract(format!(
                "set_values: expected {} elements, got {}",
                inner.values.len(),
                values.len()
            )));
        }
        inner.values = values;
        Ok(())
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        if let Some(g) = inner.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn parents(&self) -> Vec<Tensor> {
        self.inner.borrow().parents.clone()
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(contribution.len(), inner.values.len());
        match inner.grad.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => inner.grad = Some(contribution.to_vec()),
        }
    }

    /// Construct an op output. Graph linkage is recorded only when some
    /// parent requires gradients; otherwise the result is a plain leaf.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: &[&Tensor],
        backward_fn: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        let out = Tensor::raw(shape, values);
        if parents.iter().any(|p| p.requires_grad_flag()) {
            let mut inner = out.inner.borrow_mut();
            inner.requires_grad = true;
            inner.parents = parents.iter().map(|p| (*p).clone()).collect();
            inner.backward_fn = Some(backward_fn);
        }
        out
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
    /// into every reachable tensor that requires them. Calling this twice on
    /// the same loss is a contract error; rebuild the graph instead.
    pub fn backward(&self) -> Result<()> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.values.len() != 1 {
                return Err(Error::Contract(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    inner.shape
                )));
            }
            if inner.backward_done {
                return Err(Error::Contract(
                    "backward already ran on this tensor; rebuild the graph to run it again".into(),
                ));
            }
            inner.backward_done = true;
        }
        self.accumulate_grad(&[1.0]);

        let order = topo_order(self);
        for node in order.iter().rev() {
            let contributions = {
                let inner = node.inner.borrow();
                let (Some(grad), Some(f)) = (inner.grad.as_ref(), inner.backward_fn.as_ref())
                else {
                    continue;
                };
                let args = BackwardArgs {
                    out_values: &inner.values,
                    out_grad: grad,
                    parents: &inner.parents,
                };
                f(&args)
            };
            let parents = node.parents();
            debug_assert_eq!(parents.len(), contributions.len());
            for (parent, contribution) in parents.iter().zip(contributions) {
                if !contribution.is_empty() && parent.requires_grad_flag() {
                    parent.accumulate_grad(&contribution);
                }
            }
        }
        Ok(())
    }
}

/// Iterative post-order over the recorded graph (parents before children in
/// the returned list, so reversing it gives a valid backward order).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.ptr_id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.parents() {
            stack.push((p, false));
        }
    }
    order
}
