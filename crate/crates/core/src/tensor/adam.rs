use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ParamStore, Tensor};

/// Adam moments and hyperparameters for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<R> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) step: u64,
    pub(crate) m: Vec<Tensor<R>>,
    pub(crate) v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(store: &ParamStore<R>) -> Self {
        Self::with_hyper(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(store: &ParamStore<R>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<R>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<R>] {
        &self.v
    }

    /// Restore serialized state, checking shapes against `store`.
    pub fn restore(
        store: &ParamStore<R>,
        hyper: (f64, f64, f64),
        step: u64,
        m: Vec<Tensor<R>>,
        v: Vec<Tensor<R>>,
    ) -> Result<Self> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(Error::format("adam state", "moment count does not match parameters"));
        }
        for ((p, a), b) in store.iter().zip(&m).zip(&v) {
            if a.shape() != p.value().shape() || b.shape() != p.value().shape() {
                return Err(Error::format(
                    "adam state",
                    format!("moment shape mismatch for {}", p.name),
                ));
            }
        }
        Ok(AdamState {
            beta1: hyper.0,
            beta2: hyper.1,
            eps: hyper.2,
            step,
            m,
            v,
        })
    }

    /// One bias-corrected Adam update with learning rate `lr`; clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore<R>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::State("optimizer state does not match parameter set".into()));
        }
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(Error::State(format!("parameter {} has no gradient", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (R::of(self.beta1), R::of(self.beta2));
        let c1 = R::of(1.0 - self.beta1.powi(t));
        let c2 = R::of(1.0 - self.beta2.powi(t));
        let lr = R::of(lr);
        let eps = R::of(self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.take().expect("checked above");
            let value = p.value_mut();
            for (((w, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (R::one() - b1) * gi;
                *vi = b2 * *vi + (R::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
