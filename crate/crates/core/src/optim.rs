//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::collections::BTreeMap;

use crate::config::AdamWConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// First and second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

/// Weight decay applies to projection matrices only.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

/// One AdamW update of every parameter in `grads`.
///
/// All gradients are checked before anything is modified, so a non-finite
/// gradient leaves parameters and state untouched.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f32,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::Parameter(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    for (name, g) in grads {
        let p = store.get(name)?;
        if p.numel() != g.len() {
            return Err(Error::dim("adamw_step", p.shape(), &[g.len()]));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = store.get_mut(name)?.data_mut();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + wd * p[i]);
        }
    }
    Ok(())
}

pub fn warmup_steps(total_steps: usize, warmup_fraction: f32) -> usize {
    (warmup_fraction as f64 * total_steps as f64).round() as usize
}

/// Linear warmup to `base_lr` over the first `warmup_fraction` of training,
/// then half-cosine decay reaching 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f32, warmup_fraction: f32) -> f32 {
    let w = warmup_steps(total_steps, warmup_fraction);
    if step < w {
        return base_lr * (step + 1) as f32 / (w + 1) as f32;
    }
    if total_steps <= w {
        return base_lr;
    }
    let progress = (step.min(total_steps) - w) as f64 / (total_steps - w) as f64;
    (base_lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
}
