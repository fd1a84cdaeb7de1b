//! Adaptive-moment optimizer.

use crate::error::{dim_err, Result};

use super::autograd::ParamStore;
use super::tensor::Tensor;

/// Adam with optional global-norm gradient clipping.
///
/// After every step parameters and moments are rounded onto the `f32` grid,
/// so a 32-bit checkpoint captures the training state exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |store: &ParamStore| store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            first: zeros(store),
            second: zeros(store),
        }
    }

    /// Restores optimizer state saved with [`Adam::moments`].
    pub fn with_state(store: &ParamStore, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<Self> {
        let mut adam = Self::new(store);
        if first.len() != store.len() || second.len() != store.len() {
            return dim_err("optimizer state does not match the parameter set");
        }
        for (id, (m, v)) in store.ids().zip(first.iter().zip(&second)) {
            if m.shape() != store.value(id).shape() || v.shape() != store.value(id).shape() {
                return dim_err(format!("optimizer moment shape for {}", store.name(id)));
            }
        }
        adam.step = step;
        adam.first = first;
        adam.second = second;
        Ok(adam)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Applies one update from the accumulated gradients; gradients are left
    /// untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let mut factor = 1.0;
        if let Some(max) = self.clip_norm {
            let norm = store
                .ids()
                .map(|id| store.grad(id).data().iter().map(|g| g * g).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > max {
                factor = max / norm;
            }
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let (value, grad) = store.value_and_grad_mut(id);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g * factor;
                *mi = round32(self.beta1 * *mi + (1.0 - self.beta1) * g);
                *vi = round32(self.beta2 * *vi + (1.0 - self.beta2) * g * g);
                let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *p = round32(*p - update);
            }
        }
    }
}

#[inline]
pub(crate) fn round32(v: f64) -> f64 {
    v as f32 as f64
}
