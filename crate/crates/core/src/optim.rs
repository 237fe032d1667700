//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("one gradient per parameter required"));
        }
        for (id, g) in store.ids().zip(grads) {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} is not finite",
                    store.name(id)
                )));
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let g = grads[k].data();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= c.lr * c.weight_decay * p[j];
                p[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.0,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s, &[Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()])
            .unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = store();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()])
            .unwrap();
        let p = s.value(s.id("p").unwrap()).data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut s = store();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[Tensor::zeros(&[2])]).unwrap();
        let p = s.value(s.id("p").unwrap()).data();
        assert!((p[0] - 0.95).abs() < 1e-12);
        assert!((p[1] + 1.9).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut s = store();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let r = opt.step(
            &mut s,
            &[Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap()],
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
