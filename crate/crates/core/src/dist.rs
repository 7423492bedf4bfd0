//! Parametric distributions with closed-form KL, entropy, log-probability,
//! and reparameterized sampling. Pure value types; all operations reentrant.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerical floor for stddevs to avoid singular KLs.
pub const MIN_STDDEV: f64 = 1e-4;

const LN_2PI: f64 = 1.8378770664093453; // ln(2π)

/// Diagonal Gaussian. Construction clamps stddevs to [`MIN_STDDEV`] and
/// rejects non-finite parameters or mismatched dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    stddev: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self> {
        if mean.len() != stddev.len() {
            return Err(Error::config("mean/stddev dimension mismatch"));
        }
        if mean.iter().chain(stddev.iter()).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("Gaussian parameters must be finite"));
        }
        let stddev = stddev.into_iter().map(|s| s.max(MIN_STDDEV)).collect();
        Ok(DiagGaussian { mean, stddev })
    }

    /// Standard normal of the given dimension.
    pub fn standard(dim: usize) -> Self {
        DiagGaussian { mean: vec![0.0; dim], stddev: vec![1.0; dim] }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    #[inline]
    pub fn stddev(&self) -> &[f64] {
        &self.stddev
    }

    /// Differential entropy: Σ (½ ln(2πe) + ln σ).
    pub fn entropy(&self) -> f64 {
        self.stddev.iter().map(|s| 0.5 * (LN_2PI + 1.0) + s.ln()).sum()
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::config("log_prob dimension mismatch"));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.stddev)
            .zip(x)
            .map(|((m, s), xi)| {
                let z = (xi - m) / s;
                -0.5 * LN_2PI - s.ln() - 0.5 * z * z
            })
            .sum())
    }
}

/// Independent standard-normal draws consumed by reparameterized sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw(pub Vec<f64>);

impl NoiseDraw {
    pub fn standard<R: Rng>(dim: usize, rng: &mut R) -> Self {
        NoiseDraw((0..dim).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn zeros(dim: usize) -> Self {
        NoiseDraw(vec![0.0; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Exact diagonal-Gaussian KL: per-dimension sum of
/// `ln(σq/σp) + (σp² + (μp−μq)²)/(2σq²) − ½`.
pub fn kl_diag_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::config("KL dimension mismatch"));
    }
    let mut kl = 0.0;
    for i in 0..p.dim() {
        let (mp, sp) = (p.mean[i], p.stddev[i]);
        let (mq, sq) = (q.mean[i], q.stddev[i]);
        let dm = mp - mq;
        kl += (sq / sp).ln() + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5;
    }
    Ok(kl)
}

/// Partial derivatives of [`kl_diag_gaussian`] with respect to both sides,
/// returned as `(d_mean_p, d_stddev_p, d_mean_q, d_stddev_q)`.
pub fn kl_diag_gaussian_grads(
    p: &DiagGaussian,
    q: &DiagGaussian,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    if p.dim() != q.dim() {
        return Err(Error::config("KL dimension mismatch"));
    }
    let n = p.dim();
    let (mut dmp, mut dsp, mut dmq, mut dsq) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (mp, sp) = (p.mean[i], p.stddev[i]);
        let (mq, sq) = (q.mean[i], q.stddev[i]);
        let dm = mp - mq;
        let sq2 = sq * sq;
        // Factored so all four vanish exactly when the parameters coincide.
        dmp[i] = dm / sq2;
        dsp[i] = (sp * sp / sq2 - 1.0) / sp;
        dmq[i] = -dm / sq2;
        dsq[i] = (1.0 - (sp * sp + dm * dm) / sq2) / sq;
    }
    Ok((dmp, dsp, dmq, dsq))
}

/// Reparameterized sample: `mean + stddev ⊙ noise`. Differentiable with
/// respect to mean (identity) and stddev (the noise) given fixed noise.
pub fn sample_reparam(d: &DiagGaussian, noise: &NoiseDraw) -> Result<Vec<f64>> {
    if noise.dim() != d.dim() {
        return Err(Error::config("noise dimension mismatch"));
    }
    Ok(d.mean
        .iter()
        .zip(&d.stddev)
        .zip(&noise.0)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

/// Finite categorical distribution over action indices, parameterized by
/// logits. Probabilities are computed in log-space with max-subtraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    logits: Vec<f64>,
}

impl Categorical {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::config("categorical needs at least one action"));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("categorical logits must be finite"));
        }
        Ok(Categorical { logits })
    }

    pub fn uniform(n: usize) -> Self {
        Categorical { logits: vec![0.0; n] }
    }

    #[inline]
    pub fn num_actions(&self) -> usize {
        self.logits.len()
    }

    #[inline]
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| l - lse).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }

    pub fn log_prob(&self, action: usize) -> Result<f64> {
        if action >= self.logits.len() {
            return Err(Error::config("action index out of range"));
        }
        Ok(self.logits[action] - log_sum_exp(&self.logits))
    }

    /// Shannon entropy of the normalized logits.
    pub fn entropy(&self) -> f64 {
        let lp = self.log_probs();
        -lp.iter().map(|&l| l.exp() * l).sum::<f64>()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let probs = self.probs();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// Index of the largest logit (greedy evaluation).
    pub fn argmax(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap()
    }
}

#[inline]
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn kl_categorical(p: &Categorical, q: &Categorical) -> Result<f64> {
    if p.num_actions() != q.num_actions() {
        return Err(Error::config("categorical KL dimension mismatch"));
    }
    let lp = p.log_probs();
    let lq = q.log_probs();
    Ok(lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum())
}

/// d KL(p‖q) / d logits_p: `p_j (log p_j − log q_j − KL)`.
pub fn kl_categorical_grad_p(p: &Categorical, q: &Categorical) -> Result<Vec<f64>> {
    let lp = p.log_probs();
    let lq = q.log_probs();
    if lp.len() != lq.len() {
        return Err(Error::config("categorical KL dimension mismatch"));
    }
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok(lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b - kl))
        .collect())
}

/// d KL(p‖q) / d logits_q: `q_j − p_j`.
pub fn kl_categorical_grad_q(p: &Categorical, q: &Categorical) -> Result<Vec<f64>> {
    if p.num_actions() != q.num_actions() {
        return Err(Error::config("categorical KL dimension mismatch"));
    }
    Ok(p.probs().iter().zip(&q.probs()).map(|(pp, qq)| qq - pp).collect())
}

/// d H(p) / d logits_j: `−p_j (log p_j − Σ p log p)`.
pub fn entropy_categorical_grad(p: &Categorical) -> Vec<f64> {
    let lp = p.log_probs();
    let mean_lp: f64 = lp.iter().map(|&l| l.exp() * l).sum();
    lp.iter().map(|&l| -l.exp() * (l - mean_lp)).collect()
}

/// d log p(a) / d logits_j: `δ_aj − p_j`.
pub fn log_prob_categorical_grad(p: &Categorical, action: usize) -> Vec<f64> {
    let probs = p.probs();
    probs
        .iter()
        .enumerate()
        .map(|(j, pj)| if j == action { 1.0 - pj } else { -pj })
        .collect()
}
