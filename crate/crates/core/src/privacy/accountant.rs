//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step RDP at integer order `alpha`:
//!
//! ```text
//! rdp(alpha) = ln( sum_{k=0}^{alpha} C(alpha,k) (1-q)^(alpha-k) q^k e^(k(k-1)/(2 sigma^2)) ) / (alpha - 1)
//! ```
//!
//! The binomial weights sum to one and the `k < 2` exponents vanish, so the
//! sum is `1 + D` with `D = sum_{k>=2} w_k (e^(g_k) - 1) >= 0`. We form
//! `ln D` by log-sum-exp over `ln w_k + g_k + ln(-expm1(-g_k))` and finish
//! with `ln1p`, which stays accurate from `D ~ 1e-12` up to `ln D ~ 2000`
//! where a direct sum would overflow.
//!
//! Composition over steps is additive in RDP; conversion to `(epsilon,
//! delta)` takes the minimum of `rdp(alpha) + ln(1/delta)/(alpha-1)` over
//! the order grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer orders 2..=64 plus 128 and 256.
pub fn default_orders() -> Vec<u32> {
    let mut orders: Vec<u32> = (2..=64).collect();
    orders.extend([128, 256]);
    orders
}

/// Per-step RDP of the subsampled Gaussian at one integer order.
/// `sigma = 0` yields `f64::INFINITY` (infinite privacy loss).
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Numeric(format!("sample rate q must be in [0,1], got {q}")));
    }
    if alpha < 2 {
        return Err(Error::Numeric(format!("order alpha must be >= 2, got {alpha}")));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Numeric(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let a = alpha as f64;
    if q == 1.0 {
        // Plain Gaussian mechanism.
        return Ok(a / (2.0 * sigma * sigma));
    }

    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    // ln C(alpha, k) built incrementally; start at k = 2.
    let mut ln_binom = a.ln() + (a - 1.0).ln() - std::f64::consts::LN_2;
    let mut ln_terms = Vec::with_capacity(alpha as usize - 1);
    for k in 2..=alpha {
        let kf = k as f64;
        if k > 2 {
            ln_binom += ((a - kf + 1.0) / kf).ln();
        }
        let g = kf * (kf - 1.0) * inv_2s2;
        let ln_w = ln_binom + (a - kf) * ln_1mq + kf * ln_q;
        // ln(w * (e^g - 1)) = ln w + g + ln(1 - e^-g)
        ln_terms.push(ln_w + g + (-(-g).exp_m1()).ln());
    }
    let ln_d = logsumexp(&ln_terms);
    // rdp = ln(1 + D) / (alpha - 1), stable on both sides of D = 1.
    let ln_s = if ln_d <= 0.0 { ln_d.exp().ln_1p() } else { ln_d + (-ln_d).exp().ln_1p() };
    Ok(ln_s / (a - 1.0))
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Convert accumulated RDP values to `(epsilon, best_order)` at `delta`.
pub fn rdp_to_dp(rdp: &[f64], orders: &[u32], delta: f64) -> Result<(f64, u32)> {
    if orders.is_empty() || rdp.len() != orders.len() {
        return Err(Error::Numeric(format!(
            "rdp_to_dp: order grid ({}) and rdp values ({}) must be non-empty and equal length",
            orders.len(),
            rdp.len()
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Numeric(format!("delta must be in (0,1), got {delta}")));
    }
    let ln_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, orders[0]);
    for (&r, &a) in rdp.iter().zip(orders) {
        let eps = r + ln_inv_delta / (a as f64 - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    Ok(best)
}

/// Privacy spent so far, as reported by the accountant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacySpent {
    pub orders: Vec<u32>,
    pub rdp_values: Vec<f64>,
    pub steps_taken: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub best_order: u32,
}

/// Accountant for one client's fixed-`(q, sigma)` mechanism. RDP composes
/// additively, so state is just the step count; `rdp_values` are recomputed
/// as `steps * per_step` to keep additivity exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RdpAccountant {
    orders: Vec<u32>,
    per_step: Vec<f64>,
    q: f64,
    sigma: f64,
    steps: u64,
}

impl RdpAccountant {
    pub fn new(orders: Vec<u32>, q: f64, sigma: f64) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::Numeric("accountant requires a non-empty order grid".into()));
        }
        let per_step = orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { orders, per_step, q, sigma, steps: 0 })
    }

    pub fn with_default_orders(q: f64, sigma: f64) -> Result<Self> {
        Self::new(default_orders(), q, sigma)
    }

    pub fn advance(&mut self, steps: u64) {
        self.steps += steps;
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    pub fn rdp_values(&self) -> Vec<f64> {
        self.per_step.iter().map(|r| self.steps as f64 * r).collect()
    }

    pub fn epsilon(&self, delta: f64) -> Result<f64> {
        Ok(rdp_to_dp(&self.rdp_values(), &self.orders, delta)?.0)
    }

    /// Epsilon this accountant would report after `extra` more steps,
    /// without advancing. Used for pre-step budget checks.
    pub fn epsilon_after(&self, extra: u64, delta: f64) -> Result<f64> {
        let t = (self.steps + extra) as f64;
        let rdp: Vec<f64> = self.per_step.iter().map(|r| t * r).collect();
        Ok(rdp_to_dp(&rdp, &self.orders, delta)?.0)
    }

    pub fn spent(&self, delta: f64) -> Result<PrivacySpent> {
        let rdp_values = self.rdp_values();
        let (epsilon, best_order) = rdp_to_dp(&rdp_values, &self.orders, delta)?;
        Ok(PrivacySpent {
            orders: self.orders.clone(),
            rdp_values,
            steps_taken: self.steps,
            epsilon,
            delta,
            best_order,
        })
    }
}

/// Epsilon after `steps` compositions of the `(q, sigma)` mechanism.
pub fn compose_epsilon(
    q: f64,
    sigma: f64,
    steps: u64,
    delta: f64,
    orders: &[u32],
) -> Result<(f64, u32)> {
    let rdp = orders
        .iter()
        .map(|&a| rdp_subsampled_gaussian(q, sigma, a).map(|r| steps as f64 * r))
        .collect::<Result<Vec<_>>>()?;
    rdp_to_dp(&rdp, orders, delta)
}

/// Smallest noise multiplier in `[0.1, 100]` whose composed epsilon stays at
/// or under `epsilon_target`, found by bisection on a geometric grid.
pub fn calibrate_noise(
    epsilon_target: f64,
    delta: f64,
    q: f64,
    steps: u64,
    orders: &[u32],
) -> Result<f64> {
    if !(epsilon_target > 0.0) {
        return Err(Error::Calibration(format!(
            "epsilon_target must be > 0, got {epsilon_target}"
        )));
    }
    let (mut lo, mut hi) = (0.1f64, 100.0f64);
    let eps_at = |s: f64| -> Result<f64> { Ok(compose_epsilon(q, s, steps, delta, orders)?.0) };
    if eps_at(lo)? <= epsilon_target {
        // Target is satisfiable even at the bracket floor.
        return Ok(lo);
    }
    let eps_hi = eps_at(hi)?;
    if eps_hi > epsilon_target {
        return Err(Error::Calibration(format!(
            "epsilon_target {epsilon_target} unreachable: sigma=100 still yields epsilon={eps_hi:.6} \
             (q={q}, steps={steps}, delta={delta})"
        )));
    }
    // Invariant: eps(lo) > target >= eps(hi). Tighten until the bracket is
    // narrow enough that eps(hi) sits within a hair of the target.
    while hi / lo > 1.0 + 1e-6 {
        let mid = (lo * hi).sqrt();
        if eps_at(mid)? <= epsilon_target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
