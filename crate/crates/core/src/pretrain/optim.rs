use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::{Error, Result};

/// Adam with decoupled weight decay, global-norm clipping, and a linear
/// warmup / linear decay schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_peak: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_steps: 1_000,
            total_steps: 20_000,
        }
    }
}

/// Learning rate at `step`: 0 at step 0, `lr_peak` at `warmup_steps`, 0 at
/// `total_steps` and beyond.
pub fn lr_at(step: u64, cfg: &OptimConfig) -> f64 {
    if step > cfg.total_steps {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.lr_peak * (step as f64 / cfg.warmup_steps as f64);
    }
    if cfg.total_steps == cfg.warmup_steps {
        return cfg.lr_peak;
    }
    cfg.lr_peak * ((cfg.total_steps - step) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64)
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    /// Completed updates.
    pub step: u64,
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Global L2 norm over every gradient buffer.
pub fn global_grad_norm(params: &ParamStore<f32>) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// One update from the gradients held in `params`, which are cleared
/// afterwards. Tensors without a gradient are treated as having zero
/// gradient.
pub fn adam_step(params: &mut ParamStore<f32>, state: &mut AdamState, cfg: &OptimConfig) -> Result<StepStats> {
    let step = state.step + 1;
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step,
                    what: format!("non-finite gradient in {name}"),
                });
            }
        }
    }
    let grad_norm = global_grad_norm(params);
    let clip = if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
        cfg.clip_norm / grad_norm
    } else {
        1.0
    };
    let lr = lr_at(step, cfg);
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    for (name, t) in params.iter_mut() {
        let n = t.numel();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let grad = t.grad().map(<[f32]>::to_vec);
        let decay = (lr * cfg.weight_decay) as f32;
        for (i, w) in t.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| (g[i] as f64 * clip) as f32);
            *w -= decay * *w;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            *w -= (lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
        }
        t.zero_grad();
    }
    state.step = step;
    Ok(StepStats { lr, grad_norm })
}
