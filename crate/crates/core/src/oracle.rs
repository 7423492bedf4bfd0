//! Independent ground-truth engines: tabular soft value iteration, exact
//! marginal-KL enumeration for the latent decomposition bound, the
//! discount-unrolling identity, Gaussian-KL quadrature, and finite-difference
//! gradient checking. These never share code with the implementations they
//! verify.

use crate::dist::DiagGaussian;
use crate::error::{Error, Result};
use crate::mlp::ParamVector;

/// Finite MDP with a row-stochastic transition tensor, reward table, and a
/// fixed default policy table.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`, rows sum to 1 within 1e-12.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`.
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    /// `default_policy[s][a]`, rows sum to 1.
    pub default_policy: Vec<Vec<f64>>,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.gamma >= 1.0 {
            return Err(Error::config("gamma must be in [0, 1)"));
        }
        if self.transition.len() != self.n_states || self.reward.len() != self.n_states {
            return Err(Error::config("table shapes do not match n_states"));
        }
        for s in 0..self.n_states {
            if self.transition[s].len() != self.n_actions {
                return Err(Error::config("transition shape mismatch"));
            }
            for a in 0..self.n_actions {
                let row = &self.transition[s][a];
                if row.len() != self.n_states {
                    return Err(Error::config("transition row length mismatch"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::config(format!(
                        "transition row ({s},{a}) is not a distribution (sum {sum})"
                    )));
                }
            }
            let psum: f64 = self.default_policy[s].iter().sum();
            if (psum - 1.0).abs() > 1e-12 {
                return Err(Error::config(format!("default policy row {s} sums to {psum}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SoftViSolution {
    /// `q[s][a]`.
    pub q: Vec<Vec<f64>>,
    /// `v[s]`.
    pub v: Vec<f64>,
    /// `pi[s][a]`, normalized by construction.
    pub pi: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

const SOFT_VI_TOL: f64 = 1e-10;
const SOFT_VI_MAX_ITERS: usize = 100_000;

/// Solves the KL-regularized control problem exactly on a tabular MDP:
/// iterates `V(s) ← α ln Σ_a π0(a|s) exp(Q(s,a)/α)` with
/// `Q(s,a) ← r(s,a) + γ Σ P V(s')` to a fixpoint, then tilts the default
/// policy: `π*(a|s) = π0(a|s) exp((Q*−V*)/α)`.
pub fn soft_value_iteration(mdp: &TabularMdp, alpha: f64) -> Result<SoftViSolution> {
    mdp.validate()?;
    if alpha <= 0.0 {
        return Err(Error::config("alpha must be positive"));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut v = vec![0.0; ns];
    let mut q = vec![vec![0.0; na]; ns];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while residual > SOFT_VI_TOL {
        iterations += 1;
        if iterations > SOFT_VI_MAX_ITERS {
            return Err(Error::NoConvergence(format!(
                "soft VI residual {residual} after {SOFT_VI_MAX_ITERS} iterations"
            )));
        }
        residual = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let mut ev = 0.0;
                for (sp, p) in mdp.transition[s][a].iter().enumerate() {
                    ev += p * v[sp];
                }
                q[s][a] = mdp.reward[s][a] + mdp.gamma * ev;
            }
        }
        for s in 0..ns {
            let new_v = alpha * weighted_log_sum_exp(&mdp.default_policy[s], &q[s], alpha);
            residual = residual.max((new_v - v[s]).abs());
            v[s] = new_v;
        }
    }
    let mut pi = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        for a in 0..na {
            pi[s][a] = mdp.default_policy[s][a] * ((q[s][a] - v[s]) / alpha).exp();
        }
    }
    Ok(SoftViSolution { q, v, pi, iterations, residual })
}

/// `ln Σ_a w_a exp(x_a/α)` with max-subtraction for stability at small α.
fn weighted_log_sum_exp(weights: &[f64], xs: &[f64], alpha: f64) -> f64 {
    let m = xs
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&x, _)| x / alpha)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs
        .iter()
        .zip(weights)
        .map(|(&x, &w)| w * (x / alpha - m).exp())
        .sum();
    m + sum.ln()
}

/// A finite latent-variable action model for one fixed context: `p_z[k]` and
/// `p_a_given_z[k][a]`.
#[derive(Debug, Clone)]
pub struct FiniteLatentModel {
    pub p_z: Vec<f64>,
    pub p_a_given_z: Vec<Vec<f64>>,
}

impl FiniteLatentModel {
    pub fn validate(&self) -> Result<()> {
        let check = |row: &[f64]| -> Result<()> {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::config("probability row does not normalize"));
            }
            Ok(())
        };
        check(&self.p_z)?;
        if self.p_a_given_z.len() != self.p_z.len() {
            return Err(Error::config("latent model shape mismatch"));
        }
        for row in &self.p_a_given_z {
            check(row)?;
        }
        Ok(())
    }

    fn marginal(&self) -> Vec<f64> {
        let na = self.p_a_given_z[0].len();
        let mut m = vec![0.0; na];
        for (k, &pz) in self.p_z.iter().enumerate() {
            for a in 0..na {
                m[a] += pz * self.p_a_given_z[k][a];
            }
        }
        m
    }
}

/// Exact marginal KL `KL(Σ_z π(z)π(a|z) ‖ Σ_z π0(z)π0(a|z))` by enumeration,
/// together with the decomposed bound `KL(z) + E_z KL(a|z)`.
///
/// Returns `(exact, bound)` and errors if the bound undercuts the exact
/// value beyond numerical noise, which would indicate an upstream KL bug.
pub fn marginal_kl_enumeration(
    pi: &FiniteLatentModel,
    pi0: &FiniteLatentModel,
) -> Result<(f64, f64)> {
    pi.validate()?;
    pi0.validate()?;
    if pi.p_z.len() != pi0.p_z.len() || pi.p_a_given_z[0].len() != pi0.p_a_given_z[0].len() {
        return Err(Error::config("latent model shapes do not match"));
    }
    let exact = discrete_kl(&pi.marginal(), &pi0.marginal());
    let kl_z = discrete_kl(&pi.p_z, &pi0.p_z);
    let mut e_kl_a = 0.0;
    for (k, &pz) in pi.p_z.iter().enumerate() {
        if pz > 0.0 {
            e_kl_a += pz * discrete_kl(&pi.p_a_given_z[k], &pi0.p_a_given_z[k]);
        }
    }
    let bound = kl_z + e_kl_a;
    if bound - exact < -1e-9 {
        return Err(Error::usage(format!(
            "decomposed bound {bound} fell below exact marginal KL {exact}"
        )));
    }
    Ok((exact, bound))
}

fn discrete_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Left side of the discount-unrolling identity: `Σ_{t=1..T} γ^t a_t`.
pub fn discounted_sum(seq: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut g = 1.0;
    for &a in seq {
        g *= gamma;
        acc += g * a;
    }
    acc
}

/// Right side of the identity:
/// `Σ_{t=1..T−1} (1−γ) γ^t Σ_{u≤t} a_u + γ^T Σ_{t=1..T} a_t`.
pub fn discount_unrolled_sum(seq: &[f64], gamma: f64) -> f64 {
    let t_max = seq.len();
    let mut acc = 0.0;
    let mut prefix = 0.0;
    let mut g = 1.0;
    for (t, &a) in seq.iter().enumerate() {
        prefix += a;
        g *= gamma;
        if t + 1 < t_max {
            acc += (1.0 - gamma) * g * prefix;
        }
    }
    acc + gamma.powi(t_max as i32) * prefix
}

/// Evaluates both sides of the discount identity; true iff they agree to
/// 1e-10.
pub fn discount_identity_check(seq: &[f64], gamma: f64) -> bool {
    (discounted_sum(seq, gamma) - discount_unrolled_sum(seq, gamma)).abs() < 1e-10
}

/// Central finite differences of a scalar loss per coordinate.
pub fn central_diff_grad<F: FnMut(&[f64]) -> f64>(mut loss: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = loss(&xs);
        xs[i] = orig - h;
        let down = loss(&xs);
        xs[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Max relative error between an analytic gradient and central differences
/// of `loss` over the parameter vector, at step size `h`.
pub fn max_rel_error_fd<F: FnMut(&ParamVector) -> f64>(
    mut loss: F,
    params: &ParamVector,
    analytic: &[f64],
    h: f64,
) -> f64 {
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p.values()[i];
        p.values_mut()[i] = orig + h;
        let up = loss(&p);
        p.values_mut()[i] = orig - h;
        let down = loss(&p);
        p.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// KL(p‖q) for 1-D Gaussians by adaptive Simpson quadrature over the ±12σ
/// support of `p` (the integrand carries a factor of `p`, so mass outside
/// is negligible). The interval is pre-split so narrow spikes cannot hide
/// between the initial sample points.
pub fn gaussian_kl_quadrature(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.dim() != 1 || q.dim() != 1 {
        return Err(Error::config("quadrature oracle is 1-D"));
    }
    let (mp, sp) = (p.mean()[0], p.stddev()[0]);
    let (mq, sq) = (q.mean()[0], q.stddev()[0]);
    let lo = mp - 12.0 * sp;
    let hi = mp + 12.0 * sp;
    let f = |x: f64| {
        let lp = log_normal_pdf(x, mp, sp);
        let lq = log_normal_pdf(x, mq, sq);
        lp.exp() * (lp - lq)
    };
    let panels = 24;
    let width = (hi - lo) / panels as f64;
    let mut acc = 0.0;
    for k in 0..panels {
        let a = lo + k as f64 * width;
        acc += adaptive_simpson(&f, a, a + width, 1e-11, 50);
    }
    Ok(acc)
}

fn log_normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * z * z
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let c = 0.5 * (a + b);
    let (fa, fb, fc) = (f(a), f(b), f(c));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb);
    simpson_recurse(f, a, b, fa, fb, fc, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fc: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let c = 0.5 * (a + b);
    let d = 0.5 * (a + c);
    let e = 0.5 * (c + b);
    let (fd, fe) = (f(d), f(e));
    let left = (c - a) / 6.0 * (fa + 4.0 * fd + fc);
    let right = (b - c) / 6.0 * (fc + 4.0 * fe + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_recurse(f, a, c, fa, fc, fd, left, tol / 2.0, depth - 1)
            + simpson_recurse(f, c, b, fc, fb, fe, right, tol / 2.0, depth - 1)
    }
}
