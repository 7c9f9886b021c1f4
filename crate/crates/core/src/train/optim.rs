use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{ParamGrads, ParamGroup, ParamStore};

/// Moment buffers for every parameter, created lazily on first update.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            weight_decay: 1e-2,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// Per-group learning rates for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub encoder: f64,
    pub head: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        GroupRates { encoder: lr, head: lr }
    }

    pub fn of(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Head => self.head,
        }
    }
}

/// One AdamW update. Decay is decoupled and applied first, and only to
/// parameters flagged for it. Parameters without a gradient are left alone.
/// Any non-finite gradient aborts the step before anything changes.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: GroupRates,
    hp: &AdamW,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    if grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = hp.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let lr = lr.of(p.group);
        let shrink = if p.decay { 1.0 - lr * hp.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w *= shrink;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak` over `ceil(warmup_frac * total)` steps,
/// then a cosine from `peak` down to `peak * min_ratio` at `step == total`.
pub fn cosine_warmup_lr(step: usize, total: usize, peak: f64, warmup_frac: f64, min_ratio: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if step >= total {
        return Ok(peak * min_ratio);
    }
    let warmup = (warmup_frac * total as f64).ceil() as usize;
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * (min_ratio + (1.0 - min_ratio) * (1.0 + (PI * progress).cos()) / 2.0))
}
