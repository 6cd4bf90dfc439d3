//! Adam with decoupled weight decay, and a linear-decay learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state. Moments exist only for parameters that were trainable
/// when the optimizer was created.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    moments: BTreeMap<ParamId, Moments>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let moments = store
            .trainable()
            .into_iter()
            .map(|id| {
                let n = store.value(id).numel();
                (
                    id,
                    Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                )
            })
            .collect();
        AdamW {
            cfg,
            moments,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    /// Applies one update from the accumulated gradients in `store`.
    ///
    /// Parameters frozen in the store are never written, whatever their
    /// accumulator holds.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for &id in self.moments.keys() {
            if !store.is_frozen(id) && !store.grad(id).is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (&id, mom) in self.moments.iter_mut() {
            if store.is_frozen(id) {
                continue;
            }
            let grad = store.grad(id).data().to_vec();
            let value = store.value_mut(id).data_mut();
            for (k, g) in grad.into_iter().enumerate() {
                mom.m[k] = beta1 * mom.m[k] + (1.0 - beta1) * g;
                mom.v[k] = beta2 * mom.v[k] + (1.0 - beta2) * g * g;
                let m_hat = mom.m[k] / bc1;
                let v_hat = mom.v[k] / bc2;
                value[k] -= lr * weight_decay * value[k];
                value[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate falling linearly from `base_lr` to zero over `total_steps`
/// optimizer steps, floored at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDecay {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl LinearDecay {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = 1.0 - step as f64 / self.total_steps as f64;
        self.base_lr * frac.max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f64, grad_fn: impl Fn(&mut ParamStore, ParamId)) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::scalar(value)).unwrap();
        grad_fn(&mut store, id);
        (store, id)
    }

    fn set_grad(store: &mut ParamStore, id: ParamId, g: f64) {
        let mut tape = crate::autodiff::Tape::new();
        let v = tape.param(store, id);
        let y = tape.scale(v, g);
        let grads = tape.backward(y).unwrap();
        store.accumulate(&grads);
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let (mut store, id) = store_with(1.5, |_, _| {});
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(id).item(), 1.5);
    }

    #[test]
    fn first_step_closed_form() {
        let g = 0.37;
        let (mut store, id) = store_with(1.0, |s, id| set_grad(s, id, g));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let lr = 5e-4;
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, lr).unwrap();
        let expected = 1.0 - lr * g / (g.abs() + cfg.eps);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
        assert!((store.value(id).item() - (1.0 - lr)).abs() < 1e-10);
    }

    #[test]
    fn frozen_parameter_is_never_written() {
        let (mut store, id) = store_with(2.0, |s, id| set_grad(s, id, 1.0));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        store.set_frozen(id, true);
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(id).item(), 2.0);

        // Frozen before creation: no state at all.
        let opt = AdamW::new(AdamWConfig::default(), &store);
        assert_eq!(opt.tracked().count(), 0);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let (mut store, id) = store_with(1.0, |s, id| set_grad(s, id, f64::NAN));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let err = opt.step(&mut store, 0.1).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(store.value(id).item(), 1.0);
    }

    #[test]
    fn linear_decay() {
        let s = LinearDecay {
            base_lr: 5e-4,
            total_steps: 10,
        };
        assert_eq!(s.lr_at(0), 5e-4);
        assert!((s.lr_at(5) - 2.5e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(10), 0.0);
        assert_eq!(s.lr_at(20), 0.0);
    }
}
