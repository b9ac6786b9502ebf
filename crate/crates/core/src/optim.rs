//! First-order optimisers over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::numerics::{Scalar, Tensor};
use crate::params::{GradMap, ParamStore};

/// SGD with classical momentum and L2 weight decay:
/// `v ← μ v + g + λ θ`, `θ ← θ − lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay: 0.0,
            velocity: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Updates every trainable parameter that has a gradient; frozen ones are skipped.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradMap<T>) {
        let (lr, mu, wd) = (T::lit(self.lr), T::lit(self.momentum), T::lit(self.weight_decay));
        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + *gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradMap<T>) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| {
                (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec()))
            });
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (T::one() - b1) * *gv;
                *vv = b2 * *vv + (T::one() - b2) * *gv * *gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
