//! DP-SGD mechanics: per-sample clipping and noisy aggregation, plus the
//! Rényi accountant in [`accountant`].
//!
//! The optimizer-facing type is [`SanitizedGradient`]. Its inner vector is
//! private and its only constructors are [`noisy_aggregate`] (the DP
//! mechanism) and the explicitly named [`SanitizedGradient::non_private`],
//! so no code path can hand raw per-sample gradients to an optimizer by
//! accident.

pub mod accountant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;

pub use accountant::{
    calibrate_noise, compose_epsilon, default_orders, rdp_subsampled_gaussian, rdp_to_dp,
    PrivacySpent, RdpAccountant,
};

/// Differential-privacy parameters for one client's training run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DpConfig {
    pub epsilon_target: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sample_rate: f64,
    pub planned_steps: u64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_target > 0.0) {
            return Err(Error::Config(format!(
                "epsilon_target must be > 0, got {}",
                self.epsilon_target
            )));
        }
        if !(self.delta >= 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must be in [0,1), got {}", self.delta)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0) {
            return Err(Error::Config(format!(
                "noise_multiplier must be >= 0, got {}",
                self.noise_multiplier
            )));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::Config(format!(
                "sample_rate must be in (0,1], got {}",
                self.sample_rate
            )));
        }
        if self.planned_steps == 0 {
            return Err(Error::Config("planned_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scale each gradient to `g * min(1, C / ||g||_2)` over all parameters
/// jointly. Zero gradients pass through unchanged.
pub fn clip_per_sample(grads: &[Vec<f64>], clip_norm: f64) -> Vec<Vec<f64>> {
    assert!(clip_norm > 0.0, "clip norm must be > 0");
    grads
        .iter()
        .map(|g| {
            let norm = crate::numerics::matrix::l2_norm(g);
            if norm <= clip_norm {
                g.clone()
            } else {
                let s = clip_norm / norm;
                g.iter().map(|v| v * s).collect()
            }
        })
        .collect()
}

/// A gradient that is safe to hand to an optimizer under the DP contract.
#[derive(Debug, Clone, PartialEq)]
pub struct SanitizedGradient {
    grad: Vec<f64>,
}

impl SanitizedGradient {
    /// Wraps a gradient that deliberately bypasses the DP mechanism
    /// (non-private baselines). The name is the audit trail.
    pub fn non_private(grad: Vec<f64>) -> Self {
        Self { grad }
    }

    pub fn values(&self) -> &[f64] {
        &self.grad
    }

    pub fn len(&self) -> usize {
        self.grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad.is_empty()
    }
}

/// The DP-SGD aggregation step: `(1/n) * (sum_i g_i + N(0, sigma^2 C^2 I))`.
/// Noise is added once to the clipped sum, then the whole thing is averaged.
pub fn noisy_aggregate(
    clipped: &[Vec<f64>],
    clip_norm: f64,
    sigma: f64,
    rng: &mut RngStream,
) -> SanitizedGradient {
    let n = clipped.len();
    assert!(n >= 1, "noisy_aggregate needs at least one gradient");
    let dim = clipped[0].len();
    let mut sum = vec![0.0; dim];
    for g in clipped {
        debug_assert_eq!(g.len(), dim);
        for (s, &v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    let scale = sigma * clip_norm;
    let inv_n = 1.0 / n as f64;
    for s in sum.iter_mut() {
        if scale > 0.0 {
            *s += scale * rng.next_gaussian();
        }
        *s *= inv_n;
    }
    SanitizedGradient { grad: sum }
}

/// One DP batch as seen by the instrumentation hook.
#[derive(Debug, Clone)]
pub struct DpBatchInfo {
    pub step: u64,
    pub batch_len: usize,
    pub pre_clip_norms: Vec<f64>,
    pub post_clip_norms: Vec<f64>,
    pub clip_norm: f64,
    pub sigma: f64,
}

/// Test/diagnostic hook invoked once per DP-SGD step, after clipping and
/// noising. Production runs pass no observer.
pub trait DpObserver {
    fn on_batch(&mut self, info: &DpBatchInfo);
}

/// Records every batch; convenient in tests.
#[derive(Debug, Default)]
pub struct RecordingObserver {
    pub batches: Vec<DpBatchInfo>,
}

impl DpObserver for RecordingObserver {
    fn on_batch(&mut self, info: &DpBatchInfo) {
        self.batches.push(info.clone());
    }
}
