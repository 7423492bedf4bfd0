//! The `verify` surface: every oracle check as a named pass/fail entry,
//! with injectable mutations that simulate the classic implementation bugs
//! (KL sign flip, dropped trace truncation, broken target-sync period).
//! Each mutation must trip at least one named check — the checks are the
//! sentinels, the mutations prove they have teeth.

use rand::{Rng, SeedableRng};

use klrl_core::dist::{kl_diag_gaussian, DiagGaussian};
use klrl_core::mlp::{self, Activation, MlpSpec, ParamVector};
use klrl_core::offpolicy::{retrace_targets, TargetSync};
use klrl_core::oracle::{
    discount_identity_check, gaussian_kl_quadrature, marginal_kl_enumeration, max_rel_error_fd,
    soft_value_iteration, FiniteLatentModel, TabularMdp,
};
use klrl_core::SeedRng;

/// A simulated implementation bug, applied inside the checked quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    FlipKlSign,
    DropTraceTruncation,
    BreakTargetSyncPeriod,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed_names(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "[{}] {}: {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        out
    }
}

fn kl_under(mutation: Option<Mutation>, p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let kl = kl_diag_gaussian(p, q).expect("valid gaussians");
    if mutation == Some(Mutation::FlipKlSign) {
        -kl
    } else {
        kl
    }
}

fn traces_under(mutation: Option<Mutation>, log_pi: &[f64], log_mu: &[f64], lambda: f64) -> Vec<f64> {
    if mutation == Some(Mutation::DropTraceTruncation) {
        // The buggy variant: λ·(π/μ) without the min with 1.
        log_pi
            .iter()
            .zip(log_mu)
            .map(|(lp, lm)| lambda * (lp - lm).exp())
            .collect()
    } else {
        klrl_core::offpolicy::traces(log_pi, log_mu, lambda).expect("finite ratios")
    }
}

fn sync_period_under(mutation: Option<Mutation>, period: u64) -> u64 {
    if mutation == Some(Mutation::BreakTargetSyncPeriod) {
        period / 2 + 1
    } else {
        period
    }
}

/// Runs every check; `mutation` corrupts the quantity under test the way a
/// real implementation bug would.
pub fn run(mutation: Option<Mutation>) -> VerifyReport {
    let mut checks = Vec::new();
    let mut push = |name: &'static str, result: Result<String, String>| {
        checks.push(match result {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(detail) => CheckResult { name, passed: false, detail },
        });
    };

    push("gaussian-kl-sign", {
        let p = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        let q = DiagGaussian::standard(1);
        let kl = kl_under(mutation, &p, &q);
        let quad = gaussian_kl_quadrature(&p, &q).unwrap();
        if (kl - 0.5).abs() < 1e-8 && (kl - quad).abs() < 1e-6 {
            Ok(format!("KL(N(1,1)‖N(0,1)) = {kl:.9}, quadrature {quad:.9}"))
        } else {
            Err(format!("closed form {kl} disagrees with quadrature {quad}"))
        }
    });

    push("gaussian-kl-nonnegative", {
        let mut rng = SeedRng::seed_from_u64(11);
        let mut worst = f64::INFINITY;
        for _ in 0..2000 {
            let p = DiagGaussian::new(
                vec![rng.gen_range(-3.0..3.0)],
                vec![rng.gen_range(0.1..3.0)],
            )
            .unwrap();
            let q = DiagGaussian::new(
                vec![rng.gen_range(-3.0..3.0)],
                vec![rng.gen_range(0.1..3.0)],
            )
            .unwrap();
            worst = worst.min(kl_under(mutation, &p, &q));
        }
        if worst >= -1e-12 {
            Ok(format!("minimum KL over 2000 random pairs: {worst:.3e}"))
        } else {
            Err(format!("negative KL {worst} observed"))
        }
    });

    push("kl-decomposition-bound", {
        let mut rng = SeedRng::seed_from_u64(12);
        let mut ok = true;
        let mut worst_slack = f64::INFINITY;
        for _ in 0..200 {
            let nz = rng.gen_range(1..=5);
            let na = rng.gen_range(2..=5);
            let pi = random_latent_model(&mut rng, nz, na);
            let pi0 = random_latent_model(&mut rng, nz, na);
            let (exact, bound) = marginal_kl_enumeration(&pi, &pi0).unwrap();
            let bound = if mutation == Some(Mutation::FlipKlSign) { -bound } else { bound };
            let slack = bound - exact;
            worst_slack = worst_slack.min(slack);
            if slack < -1e-9 {
                ok = false;
            }
        }
        if ok {
            Ok(format!("bound dominates exact marginal KL; min slack {worst_slack:.3e}"))
        } else {
            Err(format!("bound fell below the exact marginal KL by {worst_slack:.3e}"))
        }
    });

    push("retrace-truncation", {
        let c = traces_under(mutation, &[2.0f64.ln()], &[0.0], 0.7);
        if (c[0] - 0.7).abs() < 1e-12 {
            Ok(format!("ratio 2 truncates to λ = {}", c[0]))
        } else {
            Err(format!("ratio 2 gave trace {} instead of λ", c[0]))
        }
    });

    push("retrace-brute-force", {
        // Both sides consume the same traces, so a truncation bug upstream
        // leaves this equivalence intact by design.
        let mut rng = SeedRng::seed_from_u64(13);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let n = 10;
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let vnext: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let kl: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let log_pi: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..1.0)).collect();
            let log_mu: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..1.0)).collect();
            let c = traces_under(mutation, &log_pi, &log_mu, 0.9);
            let fast = retrace_targets(&rewards, &q, &vnext, &kl, 0.95, 0.4, &c).unwrap();
            for t in 0..n {
                let mut want = q[t];
                for s in t..n {
                    let mut coef = 0.95f64.powi((s - t) as i32);
                    for i in (t + 1)..=s {
                        coef *= c[i];
                    }
                    want += coef * (rewards[s] + 0.95 * (vnext[s] - 0.4 * kl[s]) - q[s]);
                }
                worst = worst.max((fast[t] - want).abs());
            }
        }
        if worst < 1e-10 {
            Ok(format!("recursion matches O(K²) expansion; max error {worst:.3e}"))
        } else {
            Err(format!("recursion deviates from brute force by {worst:.3e}"))
        }
    });

    push("target-sync-period", {
        let period = sync_period_under(mutation, 100);
        let mut sync = TargetSync::new(period);
        let mut fired_at = Vec::new();
        for update in 1..=300u64 {
            if sync.tick() {
                fired_at.push(update);
            }
        }
        if fired_at == vec![101, 202] {
            Ok("syncs fire at update counts 101 and 202 for period 100".into())
        } else {
            Err(format!("syncs fired at {fired_at:?}, expected [101, 202]"))
        }
    });

    push("soft-vi-fixpoint", {
        let mut rng = SeedRng::seed_from_u64(14);
        let mut worst_resid = 0.0f64;
        let mut ok = true;
        for _ in 0..5 {
            let mdp = random_mdp(&mut rng, 5, 3, 0.9);
            match soft_value_iteration(&mdp, 0.5) {
                Ok(sol) => {
                    worst_resid = worst_resid.max(sol.residual);
                    for s in 0..5 {
                        let row: f64 = sol.pi[s].iter().sum();
                        if (row - 1.0).abs() > 1e-12 {
                            ok = false;
                        }
                    }
                }
                Err(_) => ok = false,
            }
        }
        if ok && worst_resid < 1e-8 {
            Ok(format!("converged on 5 random MDPs; worst residual {worst_resid:.3e}"))
        } else {
            Err(format!("soft VI failed (worst residual {worst_resid:.3e})"))
        }
    });

    push("discount-identity", {
        let mut rng = SeedRng::seed_from_u64(15);
        let mut ok = true;
        for _ in 0..500 {
            let t = rng.gen_range(1..=100);
            let seq: Vec<f64> = (0..t).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let gamma = rng.gen_range(0.01..0.99);
            if !discount_identity_check(&seq, gamma) {
                ok = false;
            }
        }
        if ok {
            Ok("identity holds on 500 random sequences".into())
        } else {
            Err("discount identity violated".into())
        }
    });

    push("gradient-finite-difference", {
        let mut rng = SeedRng::seed_from_u64(16);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let spec = MlpSpec::new(vec![3, 8, 2], Activation::Elu).unwrap();
            let p = ParamVector::init(&spec, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cot: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let trace = mlp::forward_traced(&spec, &p, &x).unwrap();
            let (grads, _) = mlp::backward(&spec, &p, &trace, &cot).unwrap();
            let loss = |pv: &ParamVector| -> f64 {
                mlp::forward(&spec, pv, &x)
                    .unwrap()
                    .iter()
                    .zip(&cot)
                    .map(|(o, c)| o * c)
                    .sum()
            };
            worst = worst.max(max_rel_error_fd(loss, &p, grads.values(), 1e-5));
        }
        if worst < 1e-4 {
            Ok(format!("max relative gradient error {worst:.3e}"))
        } else {
            Err(format!("gradient error {worst:.3e} exceeds 1e-4"))
        }
    });

    VerifyReport { checks }
}

fn random_latent_model(rng: &mut SeedRng, nz: usize, na: usize) -> FiniteLatentModel {
    let norm_row = |rng: &mut SeedRng, n: usize| {
        let mut row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = row.iter().sum();
        for p in &mut row {
            *p /= sum;
        }
        let resid = 1.0 - row.iter().sum::<f64>();
        row[n - 1] += resid;
        row
    };
    FiniteLatentModel {
        p_z: norm_row(rng, nz),
        p_a_given_z: (0..nz).map(|_| norm_row(rng, na)).collect(),
    }
}

pub fn random_mdp(rng: &mut SeedRng, ns: usize, na: usize, gamma: f64) -> TabularMdp {
    let mut transition = vec![vec![vec![0.0; ns]; na]; ns];
    let mut reward = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        for a in 0..na {
            let mut row: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for p in &mut row {
                *p /= sum;
            }
            let resid = 1.0 - row.iter().sum::<f64>();
            row[ns - 1] += resid;
            transition[s][a] = row;
            reward[s][a] = rng.gen_range(-1.0..1.0);
        }
    }
    let default_policy = vec![vec![1.0 / na as f64; na]; ns];
    TabularMdp { n_states: ns, n_actions: na, transition, reward, gamma, default_policy }
}
