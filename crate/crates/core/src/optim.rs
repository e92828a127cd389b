//! AdamW with decoupled weight decay and the warmup-stable-decay learning
//! rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_peak: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub stable_steps: usize,
    pub decay_steps: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        // desk-scale defaults: minutes, not token budgets
        OptimConfig {
            lr_peak: 3e-3,
            lr_min: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 200,
            stable_steps: 1400,
            decay_steps: 400,
            batch_size: 64,
            total_steps: 2000,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    /// Production-scale schedule preset (peak 1e-5, 20 warmup steps); the
    /// phase lengths here still assume a desk run length.
    pub fn full_scale() -> Self {
        OptimConfig {
            lr_peak: 1e-5,
            lr_min: 1e-6,
            warmup_steps: 20,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig(format!(
                "optim.beta1/beta2 must be in [0, 1), got {}/{}",
                self.beta1, self.beta2
            )));
        }
        if self.lr_min > self.lr_peak {
            return Err(Error::InvalidConfig(format!(
                "optim.lr_min ({}) must not exceed optim.lr_peak ({})",
                self.lr_min, self.lr_peak
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidConfig("optim.eps must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "optim.weight_decay must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("optim.batch_size must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::InvalidConfig(
                    "optim.clip_norm must be positive when set".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Warmup-stable-decay schedule: linear ramp to `lr_peak`, plateau, linear
/// decay to `lr_min`, then flat at `lr_min`.
pub fn wsd_lr(step: usize, c: &OptimConfig) -> f64 {
    if step < c.warmup_steps {
        return c.lr_peak * (step + 1) as f64 / c.warmup_steps as f64;
    }
    let after_warmup = step - c.warmup_steps;
    if after_warmup < c.stable_steps {
        return c.lr_peak;
    }
    let into_decay = after_warmup - c.stable_steps;
    if into_decay < c.decay_steps {
        // written so the final decay step is exactly lr_min
        let frac = (into_decay + 1) as f64 / c.decay_steps as f64;
        return c.lr_min + (c.lr_peak - c.lr_min) * (1.0 - frac);
    }
    c.lr_min
}

/// First and second moments for one parameter list, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Completed update count (bias-correction exponent).
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(shapes: &[&[usize]]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &[(String, &Tensor<T>)]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|(_, t)| t.shape()).collect();
        Self::zeros(&shapes)
    }
}

/// One AdamW update for a single parameter tensor. `t` is the 1-based step
/// used for bias correction; decoupled decay `theta *= 1 - lr * wd` is
/// applied before the moment update.
pub fn adamw_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: u64,
    lr: f64,
    weight_decay: f64,
    c: &OptimConfig,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite { op: "adamw gradient" });
    }
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            expected: param.shape().to_vec(),
            got: grad.shape().to_vec(),
        });
    }
    let lr_t = T::from_f64(lr);
    let b1 = T::from_f64(c.beta1);
    let b2 = T::from_f64(c.beta2);
    let eps = T::from_f64(c.eps);
    let one = T::one();
    let bc1 = one - T::from_f64(c.beta1.powi(t as i32));
    let bc2 = one - T::from_f64(c.beta2.powi(t as i32));
    let shrink = one - lr_t * T::from_f64(weight_decay);
    for i in 0..param.numel() {
        let g = grad.data()[i];
        let p = param.data_mut();
        p[i] = p[i] * shrink;
        let mi = &mut m.data_mut()[i];
        *mi = b1 * *mi + (one - b1) * g;
        let vi = &mut v.data_mut()[i];
        *vi = b2 * *vi + (one - b2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        p[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Update every parameter in canonical order. `decay_mask` selects which
/// parameters receive weight decay (weight matrices; not LN or bias).
pub fn adamw_update<T: Scalar>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &[Tensor<T>],
    decay_mask: &[bool],
    state: &mut AdamState<T>,
    lr: f64,
    c: &OptimConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    for (i, (_, param)) in params.iter_mut().enumerate() {
        let wd = if decay_mask[i] { c.weight_decay } else { 0.0 };
        adamw_step(param, &grads[i], &mut state.m[i], &mut state.v[i], t, lr, wd, c)?;
    }
    Ok(())
}

/// Global-norm clip over all gradients (fixed order). Returns the pre-clip
/// norm.
pub fn clip_gradients<T: Scalar>(grads: &mut [Tensor<T>], max_norm: Option<f64>) -> f64 {
    let mut sq = T::zero();
    for g in grads.iter() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt().to_f64();
    if let Some(max) = max_norm {
        if norm > max {
            let scale = T::from_f64(max / norm);
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
    norm
}
