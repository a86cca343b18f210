use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::Param;
use crate::{Error, Real, Result};

/// Peak learning rate for distillation runs.
pub const PEAK_LR_KD: f64 = 5e-4;
/// Peak learning rate for training from scratch.
pub const PEAK_LR_SCRATCH: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to parameters flagged for decay.
    pub weight_decay: f64,
    /// Fraction of the run spent warming up.
    pub warmup: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            peak_lr: PEAK_LR_KD,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            warmup: 0.06,
            max_grad_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.warmup > 0.0
            && self.warmup < 1.0
            && self.max_grad_norm.is_none_or(|n| n > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Linear warmup from 0 to `peak` over `[0, warmup]`, then linear decay to 0
/// at 1. Fractions outside `[0, 1]` are clamped with a warning.
pub fn lr_at(fraction: f64, peak: f64, warmup: f64) -> Result<f64> {
    if !(warmup > 0.0 && warmup < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "warmup must lie in (0, 1), got {warmup}"
        )));
    }
    let f = if fraction.is_nan() {
        log::warn!("schedule fraction is NaN; using 0");
        0.0
    } else if !(0.0..=1.0).contains(&fraction) {
        log::warn!("schedule fraction {fraction} clamped to [0, 1]");
        fraction.clamp(0.0, 1.0)
    } else {
        fraction
    };
    Ok(if f <= warmup {
        peak * f / warmup
    } else {
        peak * (1.0 - f) / (1.0 - warmup)
    })
}

/// AdamW moments for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new<'a, I>(config: OptimizerConfig, params: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Param<T>>,
    {
        config.validate()?;
        let sizes: Vec<usize> = params.into_iter().map(|p| p.data.len()).collect();
        Ok(Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        })
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm<T: Real>(grads: &[Vec<T>]) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|&g| {
            let g = Real::to_f64(g);
            g * g
        })
        .sum();
    libm::sqrt(sq)
}

/// One AdamW update:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)` with bias-corrected moments and decay
/// only on parameters flagged for it. A non-finite gradient rejects the whole
/// step and leaves parameters and state untouched.
pub fn adamw_step<T: Real>(
    params: &mut [&mut Param<T>],
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.data.len() != g.len() || g.len() != m.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            log::error!("non-finite gradient in {} at index {i}; step skipped", p.name);
            return Err(Error::NonFiniteGradient(format!("{}[{i}]", p.name)));
        }
    }
    let c = state.config;
    let clip = match c.max_grad_norm {
        Some(max) => {
            let norm = grad_norm(grads);
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let step_size = T::from_f64(lr / bc1);
    let inv_sqrt_bc2 = T::from_f64(1.0 / libm::sqrt(bc2));
    let eps = T::from_f64(c.eps);
    let clip = T::from_f64(clip);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = T::from_f64(if p.decay { lr * c.weight_decay } else { 0.0 });
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            let gj = g[j] * clip;
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            let theta = p.data[j];
            let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
            p.data[j] = theta - step_size * m[j] / denom - decay * theta;
        }
    }
    Ok(())
}
