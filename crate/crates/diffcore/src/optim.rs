use crate::error::{shape_err, Result};
use crate::tensor::{ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// SGD or Adam over a `ParamStore`. Frozen parameters and parameters without
/// a gradient entry are left untouched (Adam moments for them do not decay).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, eps: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps = eps;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for (id, g) in grads.iter() {
            if id.index() >= store.len() {
                return shape_err("optimizer", format!("gradient for unknown parameter {}", id.index()));
            }
            if store.get(id).len() != g.len() {
                return shape_err(
                    "optimizer",
                    format!(
                        "parameter `{}` has {} values, gradient has {}",
                        store.name(id),
                        store.get(id).len(),
                        g.len()
                    ),
                );
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in grads.iter() {
                    if store.is_frozen(id) {
                        continue;
                    }
                    for (p, gi) in store.get_mut(id).data_mut().iter_mut().zip(g) {
                        *p -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() < store.len() {
                    self.m.resize(store.len(), None);
                    self.v.resize(store.len(), None);
                }
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (id, g) in grads.iter() {
                    if store.is_frozen(id) {
                        continue;
                    }
                    let i = id.index();
                    let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    let data = store.get_mut(id).data_mut();
                    for k in 0..g.len() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        data[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> (ParamStore, crate::tensor::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(value)).unwrap();
        (store, id)
    }

    #[test]
    fn sgd_examples() {
        let (mut store, id) = single(1.0);
        let mut g = ParamGrads::zeros_like(&store);
        g.set(id, vec![2.0]);
        Optimizer::sgd(0.1).step(&mut store, &g).unwrap();
        assert!((store.get(id).data()[0] - 0.8).abs() < 1e-15);

        Optimizer::sgd(0.0).step(&mut store, &g).unwrap();
        assert!((store.get(id).data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step() {
        let (mut store, id) = single(0.0);
        let mut g = ParamGrads::zeros_like(&store);
        g.set(id, vec![1.0]);
        Optimizer::adam(1e-3).step(&mut store, &g).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((store.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let (mut store, id) = single(1.0);
        store.set_frozen(id, true);
        let mut g = ParamGrads::zeros_like(&store);
        g.set(id, vec![2.0]);
        Optimizer::sgd(0.1).step(&mut store, &g).unwrap();
        assert_eq!(store.get(id).data()[0], 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut store, id) = single(1.0);
        let mut g = ParamGrads::zeros_like(&store);
        g.set(id, vec![2.0, 3.0]);
        assert!(Optimizer::adam(0.1).step(&mut store, &g).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![0.0, 0.0])).unwrap();
        let mut g = ParamGrads::zeros_like(&store);
        g.set(id, vec![3.0, 4.0]);
        let mut big = g.clone();
        assert_eq!(clip_grad_norm(&mut big, 10.0), 5.0);
        assert_eq!(big, g);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let c = g.get(id).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);

        let mut zero = ParamGrads::zeros_like(&store);
        zero.set(id, vec![0.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut zero, 1.0), 0.0);
        assert!(zero.is_all_zero());
    }
}
