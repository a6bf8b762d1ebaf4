//! Adam with per-parameter moment tensors, keyed by parameter name.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::{GradStore, ParameterStore};
use crate::Real;

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam<R: Real> {
    lr: R,
    beta1: R,
    beta2: R,
    t: u64,
    m: BTreeMap<String, ArrayD<R>>,
    v: BTreeMap<String, ArrayD<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr: R::from_f64(lr),
            beta1: R::from_f64(beta1),
            beta2: R::from_f64(beta2),
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update for every gradient in `grads`.
    pub fn step(&mut self, store: &mut ParameterStore<R>, grads: &GradStore<R>) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = R::one() - self.beta1.powi(t);
        let bc2 = R::one() - self.beta2.powi(t);
        let eps = R::from_f64(ADAM_EPS);
        for (name, g) in grads.iter() {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let param = store.get_mut(name);
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (R::one() - self.beta1) * g;
                    *v = self.beta2 * *v + (R::one() - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p - self.lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }
}
