//! Distortion-conditioned Gaussian head used only during training.
//!
//! A sample with distortion level `q` gets a target confidence `p(q)`, linearly
//! interpolated from `p_max` at `q = a` down to `p_min` at `q = b`. The target
//! is mapped to the logit `center` whose one-hot softmax confidence equals `p`,
//! and every logit is passed through `A * exp(-(z - center)^2 / (2 sigma^2))`
//! before the softmax/cross-entropy. Dropping the head leaves the network
//! unchanged.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RbfError {
    #[error("distortion level {q} outside [{a}, {b}]")]
    QOutOfRange { q: f64, a: f64, b: f64 },
    #[error("target confidence {0} outside (0, 1)")]
    POutOfRange(f64),
    #[error("invalid head configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfConfig {
    pub p_max: f64,
    pub p_min: f64,
    /// Distortion range `[a, b]`.
    pub a: f64,
    pub b: f64,
    /// Peak height.
    pub peak: f64,
    /// Width of the Gaussian (distinct from the blur sigma).
    pub sigma_rbf: f64,
    pub num_classes: usize,
}

impl Default for RbfConfig {
    fn default() -> Self {
        Self {
            p_max: 0.6,
            p_min: 0.3,
            a: 0.0,
            b: 4.0,
            peak: 6.0,
            sigma_rbf: 0.7,
            num_classes: 10,
        }
    }
}

impl RbfConfig {
    pub fn validate(&self) -> Result<(), RbfError> {
        let bad = |m: &str| Err(RbfError::InvalidConfig(m.to_string()));
        if !(0.0 < self.p_min && self.p_min < self.p_max && self.p_max < 1.0) {
            return bad("need 0 < p_min < p_max < 1");
        }
        if !(self.peak > 0.0 && self.peak.is_finite()) {
            return bad("peak must be positive");
        }
        if !(self.sigma_rbf > 0.0 && self.sigma_rbf.is_finite()) {
            return bad("sigma_rbf must be positive");
        }
        if !self.a.is_finite() || !self.b.is_finite() || self.a >= self.b {
            return bad("need a < b");
        }
        if self.num_classes < 2 {
            return bad("need at least 2 classes");
        }
        Ok(())
    }

    /// Logit center for a sample at distortion `q`.
    pub fn center_for(&self, q: f64) -> Result<f64, RbfError> {
        center_from_target(target_estimate(q, self)?, self.num_classes)
    }
}

/// Target confidence, decreasing linearly from `p_max` at `a` to `p_min` at `b`.
pub fn target_estimate(q: f64, cfg: &RbfConfig) -> Result<f64, RbfError> {
    if !(q >= cfg.a && q <= cfg.b) {
        return Err(RbfError::QOutOfRange {
            q,
            a: cfg.a,
            b: cfg.b,
        });
    }
    Ok(cfg.p_max - (cfg.p_max - cfg.p_min) * (q - cfg.a) / (cfg.b - cfg.a))
}

/// Inverse of [`logit_confidence`]: `ln(p (K - 1)) - ln(1 - p)`.
pub fn center_from_target(p: f64, num_classes: usize) -> Result<f64, RbfError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(RbfError::POutOfRange(p));
    }
    Ok((p * (num_classes - 1) as f64).ln() - (1.0 - p).ln())
}

/// Softmax confidence of a logit `center` when the other `K - 1` logits are zero.
pub fn logit_confidence(center: f64, num_classes: usize) -> f64 {
    let rest = (num_classes - 1) as f64;
    if center > 0.0 {
        1.0 / (1.0 + rest * (-center).exp())
    } else {
        let e = center.exp();
        e / (e + rest)
    }
}

pub fn rbf_transform(z: &[f64], center: f64, cfg: &RbfConfig) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    rbf_transform_into(z, center, cfg, &mut out);
    out
}

pub fn rbf_transform_into(z: &[f64], center: f64, cfg: &RbfConfig, out: &mut [f64]) {
    let denom = 2.0 * cfg.sigma_rbf * cfg.sigma_rbf;
    for (o, &zk) in out.iter_mut().zip(z) {
        let d = zk - center;
        *o = cfg.peak * (-d * d / denom).exp();
    }
}

/// Gradient w.r.t. `z` given `upstream = dL/d(head output)`; `center` is a constant.
pub fn rbf_backward(z: &[f64], center: f64, cfg: &RbfConfig, upstream: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    rbf_backward_into(z, center, cfg, upstream, &mut out);
    out
}

pub fn rbf_backward_into(
    z: &[f64],
    center: f64,
    cfg: &RbfConfig,
    upstream: &[f64],
    out: &mut [f64],
) {
    let s2 = cfg.sigma_rbf * cfg.sigma_rbf;
    for ((o, &zk), &u) in out.iter_mut().zip(z).zip(upstream) {
        let d = zk - center;
        let g = cfg.peak * (-d * d / (2.0 * s2)).exp();
        *o = u * g * (-d / s2);
    }
}
