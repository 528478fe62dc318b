//! Define-by-run reverse-mode differentiation.
//!
//! Every op on a recording [`Tape`] appends one node holding the closure that
//! maps the output gradient to input gradients. Node ids are assigned in
//! execution order, so walking them backwards is a valid topological order.
//! A tape built with [`Tape::no_grad`] records nothing: intermediate values are
//! freed as soon as their [`Var`] handles drop, which is what inference uses.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub(crate) type BackwardFn<R> = Box<dyn Fn(&Tensor<R>, &[bool]) -> Result<Vec<Option<Tensor<R>>>>>;

struct Node<R> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<R>>,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub struct Tape<R: Real> {
    id: u64,
    nodes: RefCell<Vec<Node<R>>>,
    recording: bool,
}

/// Handle to a value produced on a tape.
///
/// Values are immutable and shared; cloning a `Var` is cheap.
#[derive(Clone)]
pub struct Var<R> {
    value: Arc<Tensor<R>>,
    node: Option<(u64, usize)>,
}

impl<R: Real> std::fmt::Debug for Var<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node.map(|n| n.1))
            .finish()
    }
}

impl<R: Real> Var<R> {
    pub fn value(&self) -> &Tensor<R> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn shared(&self) -> Arc<Tensor<R>> {
        Arc::clone(&self.value)
    }

    pub fn item(&self) -> Result<R> {
        self.value.item()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads<R> {
    tape_id: u64,
    by_node: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Grads<R> {
    /// Gradient of the loss with respect to `var`, if `var` is a leaf reachable from it.
    pub fn get(&self, var: &Var<R>) -> Option<&Tensor<R>> {
        let (tape, id) = var.node?;
        if tape != self.tape_id {
            return None;
        }
        self.by_node.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var<R>) -> Option<Tensor<R>> {
        let (tape, id) = var.node?;
        if tape != self.tape_id {
            return None;
        }
        self.by_node.get_mut(id).and_then(Option::take)
    }
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    /// A recording tape.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that evaluates ops without recording anything.
    pub fn no_grad() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            recording,
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

    /// A differentiable leaf (when recording).
    pub fn leaf(&self, value: Tensor<R>) -> Var<R> {
        self.leaf_shared(Arc::new(value))
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<R>>) -> Var<R> {
        if !self.recording {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value,
            node: Some((self.id, nodes.len() - 1)),
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<R>) -> Var<R> {
        Var {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn constant_shared(&self, value: Arc<Tensor<R>>) -> Var<R> {
        Var { value, node: None }
    }

    pub fn scalar(&self, v: R) -> Var<R> {
        self.constant(Tensor::scalar(v))
    }

    fn parent_of(&self, v: &Var<R>) -> Result<Option<usize>> {
        match v.node {
            None => Ok(None),
            Some((tape, id)) if tape == self.id => Ok(Some(id)),
            Some(_) => Err(Error::State("variable belongs to a different tape".into())),
        }
    }

    /// Append an op result. `backward` receives the output gradient and a mask of
    /// which inputs need a gradient, and returns one entry per input.
    pub(crate) fn record<F>(&self, value: Tensor<R>, inputs: &[&Var<R>], backward: F) -> Result<Var<R>>
    where
        F: Fn(&Tensor<R>, &[bool]) -> Result<Vec<Option<Tensor<R>>>> + 'static,
    {
        self.record_shared(Arc::new(value), inputs, backward)
    }

    /// As [`Tape::record`], for ops whose backward closure holds on to the output.
    pub(crate) fn record_shared<F>(&self, value: Arc<Tensor<R>>, inputs: &[&Var<R>], backward: F) -> Result<Var<R>>
    where
        F: Fn(&Tensor<R>, &[bool]) -> Result<Vec<Option<Tensor<R>>>> + 'static,
    {
        let mut parents = Vec::with_capacity(inputs.len());
        for v in inputs {
            parents.push(self.parent_of(v)?);
        }
        if !self.recording || parents.iter().all(Option::is_none) {
            return Ok(Var { value, node: None });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            backward: Some(Box::new(backward)),
        });
        Ok(Var {
            value,
            node: Some((self.id, nodes.len() - 1)),
        })
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across every use
    /// of a value; only leaf gradients are kept in the result.
    pub fn backward(&self, loss: &Var<R>) -> Result<Grads<R>> {
        if loss.value.numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let start = self
            .parent_of(loss)?
            .ok_or_else(|| Error::State("loss does not depend on any differentiable leaf".into()))?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<R>>> = (0..nodes.len()).map(|_| None).collect();
        grads[start] = Some(Tensor::full(loss.shape(), R::one()));
        for id in (0..=start).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs)?;
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (parent, ig) in node.parents.iter().zip(input_grads) {
                let (Some(p), Some(ig)) = (parent, ig) else {
                    continue;
                };
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign_from(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Grads {
            tape_id: self.id,
            by_node: grads,
        })
    }
}
