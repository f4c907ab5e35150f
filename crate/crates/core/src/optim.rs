//! Masked Adam and SGD steps, learning-rate schedule, gradient clipping and
//! the L2-to-pretrained penalty.
//!
//! The training pipeline per step is: raw gradient → [`clip_global_norm`] →
//! mask → [`child_tuning_adam_step`]. The mask is applied inside the step,
//! before the moment updates, so frozen coordinates keep zero moments.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::masking::GradMask;
use crate::numeric::{all_finite, l2_norm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay rate, applied only to child coordinates.
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Filled in by the training loop from epochs × batches when 0.
    pub total_steps: usize,
    /// `None` disables clipping; written as `false` in config files.
    #[serde(with = "clip_norm")]
    pub clip_max_norm: Option<f64>,
}

mod clip_norm {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Norm(f64),
        Enabled(bool),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(c) => Repr::Norm(*c),
            None => Repr::Enabled(false),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Norm(c) => Ok(Some(c)),
            Repr::Enabled(false) => Ok(None),
            Repr::Enabled(true) => Err(serde::de::Error::custom(
                "clip_max_norm takes a norm or `false`",
            )),
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: 0,
            clip_max_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be > 0".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if let Some(c) = self.clip_max_norm {
            if !(c > 0.0) {
                return bad(format!("clip_max_norm must be > 0, got {c}"));
            }
        }
        Ok(())
    }
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if all_finite(v) {
        Ok(())
    } else {
        Err(Error::NumericOverflow(what.to_string()))
    }
}

/// One Adam step on `grads ⊙ mask`, with bias correction and decoupled
/// weight decay restricted to coordinates where the mask is positive.
pub fn child_tuning_adam_step(
    params: &mut [f64],
    grads: &[f64],
    mask: &GradMask,
    state: &mut AdamState,
    config: &OptimConfig,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    check_len("adam step grads", n, grads.len())?;
    check_len("adam step mask", n, mask.len())?;
    check_len("adam step first moment", n, state.m.len())?;
    check_len("adam step second moment", n, state.v.len())?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    check_finite("adam step gradient", grads)?;
    check_finite("adam step parameters", params)?;

    let t = state
        .t
        .checked_add(1)
        .ok_or_else(|| Error::NumericOverflow("adam step counter".into()))?;
    state.t = t;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let decay = lr * config.weight_decay;

    for i in 0..n {
        let scale = mask.scales()[i];
        let g = grads[i] * scale;
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        // m == 0 means a zero step; skipping it avoids 0/0 when eps == 0.
        if m != 0.0 {
            let m_hat = m / c1;
            let v_hat = v / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
        if scale > 0.0 && decay != 0.0 {
            params[i] -= decay * params[i];
        }
    }
    check_finite("adam step result", params)
}

/// `w ← w - eta · (grads ⊙ mask)`
pub fn sgd_masked_step(params: &mut [f64], grads: &[f64], mask: &GradMask, eta: f64) -> Result<()> {
    check_len("sgd step grads", params.len(), grads.len())?;
    check_len("sgd step mask", params.len(), mask.len())?;
    for ((w, g), m) in params.iter_mut().zip(grads).zip(mask.scales()) {
        *w -= eta * (g * m);
    }
    Ok(())
}

/// Linear warmup from 0 to `eta` over `warmup_steps`, then linear decay to 0
/// at `total_steps`.
pub fn lr_schedule(step: usize, config: &OptimConfig) -> Result<f64> {
    config.validate()?;
    let (warm, total) = (config.warmup_steps, config.total_steps);
    if step > total {
        return Err(Error::invalid(format!(
            "step {step} beyond total_steps {total}"
        )));
    }
    if step < warm {
        return Ok(config.eta * step as f64 / warm as f64);
    }
    if total == warm {
        return Ok(config.eta);
    }
    Ok(config.eta * (total - step) as f64 / (total - warm) as f64)
}

/// Rescales `grads` in place so that its L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!(
            "max_norm must be > 0, got {max_norm}"
        )));
    }
    let norm = l2_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    Ok(norm)
}

/// `λ‖w - w0‖²` and its gradient `2λ(w - w0)`.
pub fn weight_decay_to_pretrained_loss(
    params: &[f64],
    w0: &[f64],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    check_len("weight decay to pretrained", params.len(), w0.len())?;
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let diff: Vec<f64> = params.iter().zip(w0).map(|(w, w0)| w - w0).collect();
    let sq = l2_norm(&diff).powi(2);
    let grad = diff.iter().map(|d| 2.0 * lambda * d).collect();
    Ok((lambda * sq, grad))
}
