//! Optimizers over a [`ParamStore`].

use alloc::vec::Vec;

use crate::autodiff::{Gradients, ParamStore};
use crate::math;
use crate::tensor::Matrix;

/// Adam with linear learning-rate warmup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates over which the rate ramps linearly from `lr / warmup` to `lr`.
    pub warmup: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Learning rate of the next step.
    pub fn current_lr(&self) -> f64 {
        let t = self.t + 1;
        if self.cfg.warmup == 0 || t >= self.cfg.warmup {
            self.cfg.lr
        } else {
            self.cfg.lr * t as f64 / self.cfg.warmup as f64
        }
    }

    /// Tensors without a gradient are left untouched and keep their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let lr = self.current_lr();
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - math::powf(c.beta1, self.t as f64);
        let bc2 = 1.0 - math::powf(c.beta2, self.t as f64);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.0 as usize;
            let p = store.get_mut(id);
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (math::sqrt(vhat) + c.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RmsProp {
    cfg: RmsPropConfig,
    sq: Vec<Option<Matrix>>,
}

impl RmsProp {
    pub fn new(cfg: RmsPropConfig) -> Self {
        Self { cfg, sq: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        if self.sq.len() < store.len() {
            self.sq.resize(store.len(), None);
        }
        let c = self.cfg;
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let s = self.sq[id.0 as usize].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for ((w, gi), si) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
                *si = c.alpha * *si + (1.0 - c.alpha) * gi * gi;
                *w -= c.lr * gi / (math::sqrt(*si) + c.eps);
            }
        }
    }
}

/// Lipschitz control for the Wasserstein critics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lipschitz {
    /// Clamp every critic weight to `[-c, c]` after each critic step.
    Clip(f64),
    Off,
}

impl Default for Lipschitz {
    fn default() -> Self {
        Lipschitz::Clip(0.05)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    /// Gradient of `mean(relu(w - 3))`: positive where `w > 3`, zero elsewhere.
    fn hinge_grads(store: &ParamStore) -> Gradients {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let w = p.var(crate::autodiff::ParamId(0));
        let target = tape.leaf(Matrix::filled(1, 2, 3.0));
        let d = tape.sub(w, target);
        let r = tape.relu(d);
        let m = tape.mean(r);
        p.gradients(&tape.backward(m))
    }

    #[test]
    fn warmup_is_linear() {
        let a = Adam::new(AdamConfig {
            lr: 1.0,
            warmup: 4,
            ..AdamConfig::default()
        });
        assert_eq!(a.current_lr(), 0.25);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.push("w", Matrix::from_vec(1, 2, alloc::vec![5.0, 1.0]));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            warmup: 0,
            ..AdamConfig::default()
        });
        let g = hinge_grads(&store);
        adam.step(&mut store, &g);
        let w = store.get(crate::autodiff::ParamId(0));
        // First bias-corrected step has magnitude lr for non-zero gradients.
        assert!((w.data()[0] - 4.9).abs() < 1e-6);
        assert_eq!(w.data()[1], 1.0);
    }

    #[test]
    fn missing_gradients_leave_parameters_alone() {
        let mut store = ParamStore::new();
        store.push("w", Matrix::filled(2, 2, 1.0));
        let before = store.clone();
        let mut r = RmsProp::new(RmsPropConfig::default());
        let zero = Gradients::zeros_like(&store);
        r.step(&mut store, &zero);
        assert_eq!(store, before);
    }
}
