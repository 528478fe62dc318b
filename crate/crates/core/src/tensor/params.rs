use std::ops::Index;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Grads, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<R> {
    pub name: String,
    value: Arc<Tensor<R>>,
    pub grad: Option<Tensor<R>>,
}

impl<R: Real> Param<R> {
    pub fn value(&self) -> &Tensor<R> {
        &self.value
    }

    pub(crate) fn value_mut(&mut self) -> &mut Tensor<R> {
        Arc::make_mut(&mut self.value)
    }
}

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Named, ordered trainable parameters.
///
/// Every store has a unique id and a version that moves on each value change,
/// so caches derived from parameter values can tell when they are stale.
#[derive(Debug)]
pub struct ParamStore<R> {
    params: Vec<Param<R>>,
    id: u64,
    version: u64,
}

impl<R: Real> Clone for ParamStore<R> {
    fn clone(&self) -> Self {
        ParamStore {
            params: self.params.clone(),
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters bound to one tape for one forward pass.
pub struct Bound<R> {
    vars: Vec<Var<R>>,
}

impl<R> Index<ParamId> for Bound<R> {
    type Output = Var<R>;

    fn index(&self, id: ParamId) -> &Var<R> {
        &self.vars[id.0]
    }
}

impl<R: Real> Bound<R> {
    pub fn vars(&self) -> &[Var<R>] {
        &self.vars
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }

    /// `(store id, version)`; changes whenever any value may have changed.
    pub fn stamp(&self) -> (u64, u64) {
        (self.id, self.version)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param {
            name,
            value: Arc::new(value),
            grad: None,
        });
        self.version += 1;
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<R>> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.version += 1;
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replace a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<R>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "param",
                format!(
                    "{}: shape {:?} does not match {:?}",
                    p.name,
                    value.shape(),
                    p.value.shape()
                ),
            ));
        }
        p.value = Arc::new(value);
        self.version += 1;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor<R>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::format("parameters", format!("unknown parameter {name}")))?;
        self.set(id, value)
    }

    /// Total number of scalar parameters.
    pub fn census(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn census_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Expose every parameter on `tape`: as leaves when recording, constants otherwise.
    pub fn bind(&self, tape: &Tape<R>) -> Bound<R> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if tape.is_recording() {
                    tape.leaf_shared(Arc::clone(&p.value))
                } else {
                    tape.constant_shared(Arc::clone(&p.value))
                }
            })
            .collect();
        Bound { vars }
    }

    /// Add gradients from a backward pass into the grad slots. Parameters the loss
    /// did not reach receive explicit zeros.
    pub fn accumulate(&mut self, grads: &mut Grads<R>, bound: &Bound<R>) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            match &mut p.grad {
                Some(acc) => acc.add_assign_from(&g),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale gradients so their global L2 norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = R::of(max_norm / norm);
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }
}
