//! Regularized-return quantities: the per-step KL regularizers combined
//! into discounted lower-bound returns (with latent-period gating), and the
//! sample-based KL decomposition bound.

use crate::error::{Error, Result};
use crate::policy::latent_schedule;

/// Coefficients of the regularized objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerConfig {
    /// KL coefficient α ≥ 0.
    pub alpha: f64,
    /// Action-entropy coefficient ≥ 0.
    pub alpha_h: f64,
    /// Discount γ in [0, 1).
    pub gamma: f64,
    /// Latent period p ≥ 1.
    pub latent_period: usize,
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config("alpha must be finite and nonnegative"));
        }
        if !(self.alpha_h.is_finite() && self.alpha_h >= 0.0) {
            return Err(Error::config("alpha_h must be finite and nonnegative"));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma must be in [0, 1)"));
        }
        if self.latent_period == 0 {
            return Err(Error::config("latent period must be >= 1"));
        }
        Ok(())
    }
}

/// Per-step terms of a trajectory: reward plus the two KL regularizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlStep {
    pub reward: f64,
    pub kl_hl: f64,
    pub kl_ll: f64,
}

/// Discounted regularized return of a trajectory whose steps are indexed
/// t = 1..T:
///
/// `Σ_t γ^t [ r_t − α·1_p(t)·kl_hl_t − α·kl_ll_t ]`
///
/// The high-level term is gated by the latent schedule; the low-level term
/// applies at every step (it is identically zero under shared low-level
/// parameters, which recovers the shared-controller objective exactly).
pub fn regularized_return(steps: &[KlStep], cfg: &RegularizerConfig) -> Result<f64> {
    cfg.validate()?;
    if steps.iter().any(|s| {
        !(s.reward.is_finite() && s.kl_hl.is_finite() && s.kl_ll.is_finite())
    }) {
        return Err(Error::non_finite("trajectory terms must be finite"));
    }
    let mut acc = 0.0;
    let mut g = 1.0;
    for (i, s) in steps.iter().enumerate() {
        let t = i + 1;
        g *= cfg.gamma;
        let gate = if latent_schedule(t, cfg.latent_period) { 1.0 } else { 0.0 };
        acc += g * (s.reward - cfg.alpha * gate * s.kl_hl - cfg.alpha * s.kl_ll);
    }
    Ok(acc)
}

/// The sample-based upper bound on the marginal action KL:
/// `KL(z|x) + E_z KL(a|z,x)`. Negative inputs indicate an upstream KL bug
/// and are rejected.
pub fn kl_decomposition_bound(hl_kl: f64, expected_ll_kl: f64) -> Result<f64> {
    if hl_kl < 0.0 || expected_ll_kl < 0.0 {
        return Err(Error::usage(format!(
            "KL terms must be nonnegative (got {hl_kl}, {expected_ll_kl})"
        )));
    }
    Ok(hl_kl + expected_ll_kl)
}
