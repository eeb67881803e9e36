//! AdamW with decoupled weight decay, plus the warmup/decay learning-rate
//! schedule used by local training.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keyed parameter collection; `BTreeMap` keeps iteration order stable.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Moves `from` into `into`, summing tensors on shared keys.
pub fn merge_grads(into: &mut ParamMap, from: ParamMap) {
    for (k, t) in from {
        match into.get_mut(&k) {
            Some(acc) => acc.add_scaled(&t, 1.0).expect("gradient shapes agree"),
            None => {
                into.insert(k, t);
            }
        }
    }
}

/// `into[k] += scale * from[k]` for every key of `from`.
pub fn add_scaled_grads(into: &mut ParamMap, from: &ParamMap, scale: f64) {
    for (k, t) in from {
        match into.get_mut(k) {
            Some(acc) => acc.add_scaled(t, scale).expect("gradient shapes agree"),
            None => {
                into.insert(k.clone(), t.scale(scale));
            }
        }
    }
}

pub fn scale_grads(grads: &mut ParamMap, scale: f64) {
    for t in grads.values_mut() {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: ParamMap,
    v: ParamMap,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW step over every key present in `grads`.
///
/// Bias-corrected Adam update plus the decoupled decay term `lr * wd * w`
/// (decay taken on the pre-step weights). Keys absent from `grads` are left
/// untouched, moments included.
pub fn adamw_step(
    params: &mut ParamMap,
    grads: &ParamMap,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (key, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient for '{key}'")));
        }
        let w = params
            .get_mut(key)
            .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter '{key}'")))?;
        if w.shape() != g.shape() {
            return Err(Error::dimension(
                "adamw_step",
                format!("'{key}': param {:?} vs grad {:?}", w.shape(), g.shape()),
            ));
        }
        let m = state
            .m
            .entry(key.clone())
            .or_insert_with(|| Tensor::zeros_like(g));
        let v = state
            .v
            .entry(key.clone())
            .or_insert_with(|| Tensor::zeros_like(g));
        let (b1, b2) = (hyper.beta1, hyper.beta2);
        for i in 0..g.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let w_old = w.data()[i];
            w.data_mut()[i] = w_old - lr * m_hat / (v_hat.sqrt() + hyper.eps) - lr * hyper.weight_decay * w_old;
        }
    }
    Ok(())
}

/// Linear warmup to `base`, then linear decay to zero over `total` steps.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base: f64, total_steps: u64, warmup_frac: f64) -> Self {
        let warmup_steps = (total_steps as f64 * warmup_frac).floor() as u64;
        LrSchedule {
            base,
            warmup_steps,
            total_steps: total_steps.max(1),
        }
    }

    /// Constant learning rate (no warmup, no decay).
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        self.base * (remaining / span).clamp(0.0, 1.0)
    }
}
