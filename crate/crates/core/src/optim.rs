use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Decoupled-weight-decay Adam. Moment state is created lazily, one slot per
/// non-frozen parameter that has been stepped.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every non-frozen parameter. Parameters without an
    /// entry in `grads` are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        // Validate first so a divergent gradient leaves every parameter untouched.
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::GradientDivergence {
                    param: store.get(id).name.clone(),
                });
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        for id in store.trainable_ids() {
            let param = store.get_mut(id);
            let n = param.value.numel();
            let state = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let grad = grads.get(id).map(|g| g.data());
            let updated: Vec<f64> = param
                .value
                .data()
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let g = grad.map_or(0.0, |g| g[i]);
                    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = state.m[i] / bc1;
                    let v_hat = state.v[i] / bc2;
                    w - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * w)
                })
                .collect();
            let dtype = param.value.dtype();
            if updated.iter().any(|&v| !dtype.round(v).is_finite()) {
                return Err(Error::ParameterDivergence {
                    param: param.name.clone(),
                });
            }
            param.value.assign(updated);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::{DType, Tensor};

    fn grads_for(store: &ParamStore, id: ParamId, scale: f64) -> Gradients {
        let mut tape = Tape::new();
        let p = tape.param(store, id);
        let s = tape.sum(p);
        let loss = tape.scale(s, scale);
        tape.backward(loss).unwrap()
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut store = ParamStore::new();
        let id = store
            .register("w", Tensor::from_rows(1, 3, vec![0.1, 0.2, 0.3], DType::F32))
            .unwrap();
        let grads = grads_for(&store, id, 1.0);
        store.set_frozen(id, true);
        let before = store.value(id).clone();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.5));
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut store = ParamStore::new();
        let id = store
            .register("w", Tensor::from_rows(1, 2, vec![0.7, -0.4], DType::F64))
            .unwrap();
        let grads = grads_for(&store, id, 0.0);
        let before = store.value(id).clone();
        AdamW::new(AdamWConfig::with_lr(0.1)).step(&mut store, &grads).unwrap();
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction: Δ = -lr · 1/(1 + eps)
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::scalar(2.0, DType::F64)).unwrap();
        let grads = grads_for(&store, id, 1.0);
        AdamW::new(AdamWConfig::with_lr(0.1)).step(&mut store, &grads).unwrap();
        let disp = store.value(id).item() - 2.0;
        assert!((disp + 0.1).abs() < 1e-6, "{disp}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.register("router", Tensor::scalar(1.0, DType::F64)).unwrap();
        let grads = grads_for(&store, id, f64::NAN);
        let err = AdamW::new(AdamWConfig::default())
            .step(&mut store, &grads)
            .unwrap_err();
        match err {
            Error::GradientDivergence { param } => assert_eq!(param, "router"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn overflowing_update_is_divergence() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::scalar(1.0, DType::F32)).unwrap();
        let grads = grads_for(&store, id, 1.0);
        let err = AdamW::new(AdamWConfig::with_lr(1e300))
            .step(&mut store, &grads)
            .unwrap_err();
        assert!(err.is_divergence(), "{err}");
        assert_eq!(store.value(id).item(), 1.0);
    }
}
