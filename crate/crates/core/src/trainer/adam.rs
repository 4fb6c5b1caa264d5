//! Adam with bias-corrected moments, one instance per network.

use crate::autograd::Grads;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1,
            beta2,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Rebuilds an optimizer from saved state; moment shapes must match `store`.
    pub fn restore(
        store: &ParamStore,
        beta1: f64,
        beta2: f64,
        steps: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(Error::Checkpoint("optimizer moment count mismatch".into()));
        }
        for ((p, a), b) in store.values().iter().zip(&m).zip(&v) {
            if p.shape() != a.shape() || p.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment shape {:?} does not match parameter {:?}",
                    a.shape(),
                    p.shape()
                )));
            }
        }
        Ok(Adam {
            beta1,
            beta2,
            steps,
            m,
            v,
        })
    }

    /// Applies one update to every parameter of `store` that received a
    /// gradient. With `lr == 0` the moments advance but parameters stay
    /// bit-identical.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..store.len() {
            let Some(grad) = grads.param(store.key(i)) else {
                continue;
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((mj, vj), &gj) in m.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *mj = b1 * *mj + (1.0 - b1) * gj;
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            }
            if lr == 0.0 {
                continue;
            }
            let p = store.get_mut(i).data_mut();
            for ((pj, mj), vj) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                *pj -= lr * (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    fn quadratic_grads(store: &ParamStore) -> Grads {
        let mut g = Graph::new();
        let p = g.param(store.key(0), store.get(0));
        let sq = g.square(p);
        let loss = g.mean(sq).unwrap();
        g.backward(loss).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::from_vec(&[2], vec![1.0, -3.0]).unwrap());
        let mut adam = Adam::new(&store, 0.5, 0.999);
        let grads = quadratic_grads(&store);
        adam.step(&mut store, &grads, 0.1);
        let w = store.get(0).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 2.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::from_vec(&[3], vec![0.3, -0.1, 7.0]).unwrap());
        let before = store.get(0).clone();
        let mut adam = Adam::new(&store, 0.5, 0.999);
        let grads = quadratic_grads(&store);
        adam.step(&mut store, &grads, 0.0);
        assert_eq!(store.get(0), &before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let mut adam = Adam::new(&store, 0.9, 0.999);
        for _ in 0..2000 {
            let grads = quadratic_grads(&store);
            adam.step(&mut store, &grads, 0.01);
        }
        assert!(store.get(0).data()[0].abs() < 1e-2);
    }
}
