//! AdamW.

use dyadmotion_core::Scalar;
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup: 100,
            clip: 1.0,
        }
    }
}

pub struct Adam<T> {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| Array2::zeros(store.value(id).dim())).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// One update from accumulated gradients (clipped in place first). Returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &mut Gradients<T>) -> f64 {
        let c = self.config;
        let norm = if c.clip > 0.0 { grads.clip_global_norm(c.clip) } else { grads.global_norm() };
        self.step += 1;
        let warm = if c.warmup > 0 { (self.step as f64 / c.warmup as f64).min(1.0) } else { 1.0 };
        let lr = c.lr * warm;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), (m, v)) in ids.into_iter().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = store.value_mut(id);
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p = *p * decay - step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            });
        }
        norm
    }
}
