use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use crate::error::{Error, Result};

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;

/// Adam moments plus the warmup-cosine schedule parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    /// Number of completed steps.
    pub step: u64,
    pub peak_lr: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(skip)]
    pub m: Option<ModelParams<f32>>,
    #[serde(skip)]
    pub v: Option<ModelParams<f32>>,
}

impl OptimizerState {
    pub fn new(peak_lr: f32, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(peak_lr > 0.0) || !peak_lr.is_finite() {
            return Err(Error::Config(format!("peak_lr must be positive, got {peak_lr}")));
        }
        if total_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "need warmup_steps < total_steps, got {warmup_steps} >= {total_steps}"
            )));
        }
        Ok(Self {
            step: 0,
            peak_lr,
            warmup_steps,
            total_steps,
            m: None,
            v: None,
        })
    }

    /// Learning rate applied at the next step.
    pub fn current_lr(&self) -> f32 {
        lr_at(self.step + 1, self.peak_lr, self.warmup_steps, self.total_steps)
    }
}

/// Warmup-cosine schedule: linear ramp from 0 to `peak` over the first
/// `warmup` steps, then cosine decay to 0 at `total`. `step` is 1-based.
pub fn lr_at(step: u64, peak: f32, warmup: u64, total: u64) -> f32 {
    let step = step.min(total);
    if warmup > 0 && step <= warmup {
        return peak * step as f32 / warmup as f32;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak * (0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
}

/// One Adam update with bias correction; advances `state.step`.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    state: &mut OptimizerState,
) -> Result<()> {
    if state.m.is_none() {
        state.m = Some(params.zeros_like());
        state.v = Some(params.zeros_like());
    }
    state.step += 1;
    let t = state.step;
    let lr = lr_at(t, state.peak_lr, state.warmup_steps, state.total_steps);
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    let m = state.m.as_mut().unwrap();
    let v = state.v.as_mut().unwrap();
    let mut p_flat = params.flat_mut();
    let g_flat = grads.flat();
    let mut m_flat = m.flat_mut();
    let mut v_flat = v.flat_mut();
    if p_flat.len() != g_flat.len() {
        return Err(Error::Shape("gradient/parameter tensor count mismatch".into()));
    }
    for ti in 0..p_flat.len() {
        let p = &mut p_flat[ti];
        let g = &g_flat[ti];
        if p.len() != g.len() {
            return Err(Error::Shape(format!(
                "gradient tensor {ti} has {} elements, parameter has {}",
                g.len(),
                p.len()
            )));
        }
        let ms = &mut m_flat[ti];
        let vs = &mut v_flat[ti];
        for i in 0..p.len() {
            ms[i] = BETA1 * ms[i] + (1.0 - BETA1) * g[i];
            vs[i] = BETA2 * vs[i] + (1.0 - BETA2) * g[i] * g[i];
            let mhat = ms[i] / bc1;
            let vhat = vs[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
    drop(p_flat);
    if !params.all_finite() {
        return Err(Error::NonFinite(format!("parameters after adam step {t}")));
    }
    Ok(())
}
