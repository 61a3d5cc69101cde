//! Adam-family optimizers with global-norm gradient clipping.

use std::collections::HashMap;

use crate::autodiff::Gradients;
use crate::float::Real;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Owned gradients in parameter order.
pub fn collect_grads<T: Real>(store: &ParamStore<T>, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
    store.ids().filter_map(|id| grads.param(id).map(|g| (id, g.clone()))).collect()
}

pub fn global_norm<T: Real>(grads: &[(ParamId, Tensor<T>)]) -> f64 {
    grads.iter().map(|(_, g)| g.data().iter().map(|x| x.f64() * x.f64()).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::c(max_norm / norm);
        grads.iter_mut().for_each(|(_, g)| g.scale_assign(s));
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decay {
    /// Decay applied directly to the weights (AdamW).
    Decoupled,
    /// Decay folded into the gradient as an L2 term (Adam).
    Coupled,
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: Decay,
    t: u64,
    moments: HashMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(weight_decay: f64, decay: Decay, betas: (f64, f64)) -> Self {
        Adam { beta1: betas.0, beta2: betas.1, eps: 1e-8, weight_decay, decay, t: 0, moments: HashMap::new() }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self::new(weight_decay, Decay::Decoupled, (0.9, 0.999))
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Weight decay touches matrices only; biases, norms and vectors are exempt.
    fn decays(value: &Tensor<T>) -> bool {
        value.rows() > 1 && value.cols() > 1
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for (id, grad) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let value = store.value_mut(*id);
            let decay = if Self::decays(value) { self.weight_decay } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(value.rows(), value.cols()), Tensor::zeros(value.rows(), value.cols())));
            let (md, vd, wd) = (m.data_mut(), v.data_mut(), value.data_mut());
            for i in 0..wd.len() {
                let w = wd[i].f64();
                let mut gi = grad.data()[i].f64();
                if self.decay == Decay::Coupled {
                    gi += decay * w;
                }
                let mi = b1 * md[i].f64() + (1.0 - b1) * gi;
                let vi = b2 * vd[i].f64() + (1.0 - b2) * gi * gi;
                md[i] = T::c(mi);
                vd[i] = T::c(vi);
                let mut next = w - lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                if self.decay == Decay::Decoupled {
                    next -= lr * decay * w;
                }
                wd[i] = T::c(next);
            }
        }
    }
}
