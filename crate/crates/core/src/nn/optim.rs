use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::real::Real;

use super::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with decoupled weight decay. Moments are kept in f64.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step_with_lr(params, grads, self.config.lr)
    }

    pub fn step_with_lr<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        let c = self.config;
        self.step += 1;
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let p: &mut Matrix<T> = params.get_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if m.len() != g.as_slice().len() {
                *m = vec![0.0; g.as_slice().len()];
                *v = vec![0.0; g.as_slice().len()];
            }
            for (((w, &gi), mi), vi) in
                p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                let gi = gi.as_f64();
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                let wf = w.as_f64();
                *w = T::of(wf - lr * (upd + c.weight_decay * wf));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap()).unwrap();
        let mut grads = Grads::empty(1);
        grads.slots[0] = Some(Matrix::from_vec(1, 2, vec![0.3, -5.0]).unwrap());
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut store, &grads);
        let w = store.get(id);
        assert!((w.get(0, 0) - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w.get(0, 1) - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn decay_shrinks_without_gradient_signal() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Matrix::from_vec(1, 1, vec![2.0]).unwrap()).unwrap();
        let mut grads = Grads::empty(1);
        grads.slots[0] = Some(Matrix::zeros(1, 1));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() });
        opt.step(&mut store, &grads);
        assert!((store.get(id).get(0, 0) - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Matrix::from_vec(1, 3, vec![3.0, -1.0, 0.5]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() });
        for _ in 0..2000 {
            let mut grads = Grads::empty(1);
            grads.slots[0] = Some(store.get(id).map(|w| 2.0 * (w - 1.0)));
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).as_slice().iter().all(|w| (w - 1.0).abs() < 1e-3));
    }
}
