use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One decoupled-weight-decay Adam update at step `t` (1-based).
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    t: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::dims("adamw", &[param.len()], &[grad.len()]));
    }
    if state.m.len() != param.len() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= cfg.lr * cfg.weight_decay * param[i] + cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW over the trainable tensors of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<Moments>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every trainable tensor that carries a gradient. Frozen
    /// tensors are never touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), Moments::default);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            adamw_update(t.data_mut(), &grad, &mut self.state[id.index()], self.t, &self.config)?;
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            store.get_mut(id).scale_grad(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.7, -1.2];
        let mut s = Moments::default();
        adamw_update(&mut p, &[0.0, 0.0], &mut s, 1, &cfg).unwrap();
        assert_eq!(p, vec![0.7, -1.2]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (theta, g) = (0.5, -0.3);
        // m̂ = g, v̂ = g² after bias correction at t = 1
        let want = theta - cfg.lr * g / ((g * g as f64).sqrt() + cfg.eps);
        let mut p = vec![theta];
        adamw_update(&mut p, &[g], &mut Moments::default(), 1, &cfg).unwrap();
        assert!((p[0] - want).abs() < 1e-12);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = AdamWConfig::default();
        let mut p = vec![2.0];
        adamw_update(&mut p, &[0.0], &mut Moments::default(), 1, &cfg).unwrap();
        assert!((p[0] - (2.0 - cfg.lr * cfg.weight_decay * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(1.0).trainable());
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1e-2,
            ..Default::default()
        });
        for _ in 0..500 {
            store.zero_grads();
            let g = 2.0 * store.get(id).data()[0];
            store.get_mut(id).accumulate_grad(&[g]).unwrap();
            opt.step(&mut store).unwrap();
        }
        assert!(store.get(id).data()[0].abs() < 1e-2);
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0).trainable());
        let b = store.add("b", Tensor::scalar(1.0));
        store.get_mut(a).accumulate_grad(&[1.0]).unwrap();
        AdamW::new(AdamWConfig::default()).step(&mut store).unwrap();
        assert_ne!(store.get(a).data()[0], 1.0);
        assert_eq!(store.get(b).data()[0], 1.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(adamw_update(&mut [0.0; 2], &[0.0; 3], &mut Moments::default(), 1, &AdamWConfig::default()).is_err());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2]).trainable());
        store.get_mut(a).accumulate_grad(&[3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        let g = store.get(a).grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
