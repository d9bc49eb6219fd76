//! AdamW with decoupled weight decay, and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2.5e-4,
            weight_decay: 0.04,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("eps must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamWState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = params.map(|_, _, p| Tensor::zeros(p.shape()));
        AdamWState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update at learning rate `lr`:
///
/// ```text
/// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
/// θ ← θ·(1 − lr·λ) − lr·m̂/(√v̂ + eps)
/// ```
///
/// Decay applies to weight matrices only. Nothing is modified when a
/// gradient is non-finite or a shape disagrees.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    for ((name, _, p), (_, _, g)) in params.fields().into_iter().zip(grads.fields()) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::contract(format!("non-finite gradient for {name}; step aborted")));
        }
    }
    let t = state.t + 1;
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    let kinds: Vec<bool> = params.fields().iter().map(|f| f.1.decays()).collect();
    let grads = grads.fields();
    let slots = params
        .slots_mut()
        .into_iter()
        .zip(state.m.slots_mut())
        .zip(state.v.slots_mut());
    for (i, ((p, m), v)) in slots.enumerate() {
        let decay = if kinds[i] { (1.0 - lr * cfg.weight_decay) as f32 } else { 1.0 };
        let g = grads[i].2.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let step = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            *theta = *theta * decay - step as f32;
        }
    }
    state.t = t;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

/// Learning rate for `step` (0-based) of a run of `total` steps.
///
/// Linear warmup from 0 reaches `base` at `step == warmup`. After that the
/// rate stays at `base` (constant) or follows
/// `base·½(1 + cos(π·(step − warmup)/(total − warmup)))`, which reaches 0 at
/// `step == total`.
pub fn lr_at(step: u64, base: f64, warmup: u64, total: u64, schedule: Schedule) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = ((step - warmup) as f64 / span).min(1.0);
            base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads
        .fields()
        .iter()
        .flat_map(|f| f.2.data())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.slots_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ViTConfig};

    fn tiny() -> (ModelParams, ModelParams) {
        let mut cfg = ViTConfig::toy();
        cfg.enc_depth = 1;
        cfg.dec_depth = 1;
        let p = init_params::<f32>(&cfg, 5).unwrap();
        let g = p.map(|_, _, t| Tensor::full(t.shape(), 0.0));
        (p, g)
    }

    #[test]
    fn single_scalar_update_is_about_point_nine() {
        let (mut p, mut g) = tiny();
        p.head_b.data_mut()[0] = 1.0;
        g.head_b.data_mut()[0] = 0.5;
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut s = AdamWState::new(&p);
        adamw_step(&mut p, &g, &mut s, &cfg, cfg.lr).unwrap();
        assert!((p.head_b.data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_decays_weights_exactly() {
        let (p0, g) = tiny();
        let mut p = p0.clone();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.04,
            ..Default::default()
        };
        let mut s = AdamWState::new(&p);
        adamw_step(&mut p, &g, &mut s, &cfg, cfg.lr).unwrap();
        let factor = (1.0f64 - 0.1 * 0.04) as f32;
        for ((_, kind, a), (_, _, b)) in p0.fields().into_iter().zip(p.fields()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let want = if kind.decays() { x * factor } else { *x };
                assert_eq!(want.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_bitwise_identity() {
        let (p0, g) = tiny();
        let mut p = p0.clone();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = AdamWState::new(&p);
        for _ in 0..3 {
            adamw_step(&mut p, &g, &mut s, &cfg, cfg.lr).unwrap();
        }
        assert_eq!(p, p0);
    }

    #[test]
    fn nan_gradient_aborts_without_side_effects() {
        let (p0, mut g) = tiny();
        g.enc_blocks[0].w1.data_mut()[3] = f32::NAN;
        let mut p = p0.clone();
        let mut s = AdamWState::new(&p);
        let err = adamw_step(&mut p, &g, &mut s, &AdamWConfig::default(), 0.1).unwrap_err();
        assert!(err.to_string().contains("enc.0.w1"), "{err}");
        assert_eq!(p, p0);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn schedule_landmarks() {
        assert_eq!(lr_at(0, 1e-3, 10, 110, Schedule::Cosine), 0.0);
        assert_eq!(lr_at(10, 1e-3, 10, 110, Schedule::Cosine), 1e-3);
        assert!((lr_at(60, 1e-3, 10, 110, Schedule::Cosine) - 5e-4).abs() < 1e-9);
        assert!(lr_at(110, 1e-3, 10, 110, Schedule::Cosine).abs() < 1e-18);
        assert_eq!(lr_at(5, 1e-3, 10, 110, Schedule::Constant), 5e-4);
        assert_eq!(lr_at(100, 1e-3, 10, 110, Schedule::Constant), 1e-3);
        assert_eq!(lr_at(0, 1e-3, 0, 10, Schedule::Constant), 1e-3);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let (_, mut g) = tiny();
        g.head_w.data_mut().fill(1.0);
        let before = clip_global_norm(&mut g, 1.0);
        assert!(before > 1.0);
        let after = clip_global_norm(&mut g, 1.0);
        assert!((after - 1.0).abs() < 1e-5);
    }
}
