use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Decoupled weight decay applied as `p ← p − lr·weight_decay·p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(5.0), weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Applies one bias-corrected Adam update from the accumulated gradients,
/// then clears them. A non-finite gradient aborts before any parameter moves.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    let mut sq = 0.0f64;
    for &id in &ids {
        for &g in params.grad(id) {
            let g = g.to_f64().unwrap_or(f64::NAN);
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
            sq += g * g;
        }
    }
    let scale = match cfg.clip_norm {
        Some(c) if sq.sqrt() > c => c / sq.sqrt(),
        _ => 1.0,
    };
    if state.m.len() != ids.len() {
        state.m = ids.iter().map(|&id| vec![0.0; params.grad(id).len()]).collect();
        state.v = state.m.clone();
        state.step = 0;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, &id) in ids.iter().enumerate() {
        let grads: Vec<f64> = params.grad(id).iter().map(|g| g.to_f64().unwrap() * scale).collect();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let values = params.value_mut(id).data_mut();
        for (i, g) in grads.into_iter().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let update = cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            let decay = cfg.lr * cfg.weight_decay * values[i].to_f64().unwrap();
            values[i] -= T::of(update + decay);
        }
    }
    params.zero_grads();
    Ok(())
}
