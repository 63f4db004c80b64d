use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::model::checkpoint::Moments;
use crate::model::{Grads, ParamStore};
use crate::scalar::Scalar;

/// Adam with decoupled weight decay. Decay applies to parameters flagged
/// `decay` (linear weights); frozen parameters are left untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub state: Moments<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.entries().iter().map(|e| e.value.mapv(|_| T::zero())).collect();
        Self { cfg, state: Moments { step: 0, m: zeros(), v: zeros() } }
    }

    pub fn from_state(cfg: AdamWConfig, state: Moments<T>) -> Self {
        Self { cfg, state }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = T::from_f64_lossy(c.lr);
        let decay = T::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::from_f64_lossy(1.0 / bc1), T::from_f64_lossy(1.0 / bc2));
        let eps = T::from_f64_lossy(c.eps);
        for (((entry, g), m), v) in params.entries_mut().iter_mut().zip(grads.values()).zip(&mut self.state.m).zip(&mut self.state.v) {
            if entry.frozen {
                continue;
            }
            if entry.decay && c.weight_decay != 0.0 {
                entry.value.mapv_inplace(|p| p * decay);
            }
            Zip::from(&mut entry.value).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mhat = *m * inv_bc1;
                let vhat = *v * inv_bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    /// Straight-line scalar reference of two optimizer steps.
    fn reference(p0: f64, grads: [f64; 2], c: AdamWConfig, decay: bool) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            if decay {
                p -= c.lr * c.weight_decay * p;
            }
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mhat = m / (1.0 - c.beta1.powi(t));
            let vhat = v / (1.0 - c.beta2.powi(t));
            p -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
        p
    }

    #[test]
    fn matches_scalar_reference() {
        let c = AdamWConfig { lr: 0.01, weight_decay: 0.1, ..AdamWConfig::default() };
        let mut ps = ParamStore::<f64>::new();
        ps.add("w", Array2::from_elem((1, 1), 0.7), true);
        ps.add("b", Array2::from_elem((1, 1), -0.3), false);
        let id = ps.add("frozen", Array2::from_elem((1, 1), 2.0), true);
        ps.set_frozen([id], true);
        let mut opt = AdamW::new(c, &ps);
        let gs = [[0.5, -0.2, 9.0], [-1.5, 0.4, 9.0]];
        for g in gs {
            let mut grads = ps.zeros_like();
            for (i, &gi) in g.iter().enumerate() {
                grads.get_mut(crate::model::ParamId(i))[[0, 0]] = gi;
            }
            opt.step(&mut ps, &grads);
        }
        let got: Vec<f64> = ps.entries().iter().map(|e| e.value[[0, 0]]).collect();
        assert!((got[0] - reference(0.7, [0.5, -1.5], c, true)).abs() < 1e-15);
        assert!((got[1] - reference(-0.3, [-0.2, 0.4], c, false)).abs() < 1e-15);
        assert_eq!(got[2], 2.0);
        assert_eq!(opt.state.step, 2);
    }
}
