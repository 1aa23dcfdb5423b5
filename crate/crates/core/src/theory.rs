//! Smoothness and PL constants, the exponential-bound constant ledger
//! (C_M, B0, C0, t0, K and the a_t/b_t/c_t schedule), the tail bound
//! itself, and pathwise checkers for the two recursions that drive it.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::{exact_gradient, hessian, visitation, Mdp, PolicyParams, SoftSolution};
use crate::numerics::{flatten, sample_in_ball, spectral_norm_sym};
use crate::optimizer::{StepSchedule, Trajectory};
use crate::parametrization::softmax_policy;

/// Safety factor applied on top of the sampled maximal Hessian norm.
pub const L1_SAFETY_FACTOR: f64 = 1.5;
/// Power-iteration tolerance for spectral norms.
pub const SPECTRAL_TOL: f64 = 1e-8;

/// The complete constant ledger behind the exponential tail bound.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryConstants {
    /// Smoothness constant of the regularized objective.
    pub l1: f64,
    /// PL constant (infimum over the relevant iterates).
    pub mu: f64,
    /// Sub-Gaussian constant of the gradient noise.
    pub sigma: f64,
    /// Universal constant of the squared-norm MGF bound.
    pub c_universal: f64,
    /// `C_M = (sigma * sqrt(d) * C)^2`.
    pub c_m: f64,
    /// `B0 = 1 / (2 eta^2 L1 C_M)`.
    pub b0: f64,
    /// `C0 = 2 L1 sigma^2`.
    pub c0: f64,
    pub eta: f64,
    pub t0: usize,
    /// Tail-bound scale `K`.
    pub k_const: f64,
    /// Probability budget of the conditioning events.
    pub epsilon: f64,
    /// Warm-start distance `|theta_1 - theta*|_2`, measured at launch.
    pub delta_init: f64,
    /// Flattened parameter dimension `d = S * A`.
    pub dim: usize,
    /// Initial value gap used in the `K` lower bound.
    pub gap1: f64,
    /// Which lower bounds were binding for `t0` and `K`.
    pub binding_constraints: Vec<String>,
}

impl TheoryConstants {
    /// `a_t = (t+t0+1)/(t+t0) * (1 - mu*eta_t + mu*eta_t^2*L1)`.
    pub fn a_t(&self, t: usize) -> f64 {
        let s = (t + self.t0) as f64;
        let eta_t = self.eta / (s + 1.0);
        (s + 1.0) / s * (1.0 - self.mu * eta_t + self.mu * eta_t * eta_t * self.l1)
    }

    /// `b_t = eta / sqrt(t+t0)`.
    pub fn b_t(&self, t: usize) -> f64 {
        self.eta / ((t + self.t0) as f64).sqrt()
    }

    /// `c_t = eta^2 L1 / (t+t0+1)`.
    pub fn c_t(&self, t: usize) -> f64 {
        self.eta * self.eta * self.l1 / ((t + self.t0 + 1) as f64)
    }

    /// The contraction factor bound `(3 + L1/mu)^{1/2}`.
    pub fn gamma_bar(&self) -> f64 {
        (3.0 + self.l1 / self.mu).sqrt()
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule { eta: self.eta, t0: self.t0 }
    }

    /// The `a_t + B0 C0 b_t^2` contraction coefficient of the MGF recursion.
    pub fn mgf_coefficient(&self, t: usize) -> f64 {
        self.a_t(t) + self.b0 * self.c0 * self.b_t(t).powi(2)
    }

    /// Re-evaluates every ledger inequality; returns the violated ones.
    pub fn violated_inequalities(&self, t_max: usize) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.mu <= self.l1) {
            out.push(format!("mu <= L1 (mu={}, L1={})", self.mu, self.l1));
        }
        if !(self.mu * self.eta - 1.0 > self.sigma * self.sigma / self.c_m) {
            out.push("(mu*eta - 1) > sigma^2/C_M".into());
        }
        for &b in t0_lower_bounds(self.l1, self.mu, self.sigma, self.eta, self.epsilon, self.delta_init, self.b0, self.c0).iter() {
            if (self.t0 as f64) < b - 1e-9 {
                out.push(format!("t0 >= {b:.6}"));
            }
        }
        for t in 1..=t_max {
            let coeff = self.mgf_coefficient(t);
            if !(0.0..1.0).contains(&coeff) {
                out.push(format!("a_t + B0*C0*b_t^2 in [0,1) at t={t} (got {coeff})"));
                break;
            }
            let k_t = 2.0 * self.c_t(t) * self.c_m / (1.0 - coeff);
            if self.k_const < k_t - 1e-9 {
                out.push(format!("K >= 2 c_t C_M / (1 - (a_t + B0 C0 b_t^2)) at t={t}"));
                break;
            }
        }
        if self.k_const < 1.0 / self.b0 - 1e-9 {
            out.push("K >= 1/B0".into());
        }
        if self.k_const < (self.t0 as f64 + 1.0) * self.gap1 - 1e-9 {
            out.push("K >= (t0+1)*gap1".into());
        }
        out
    }
}

/// Estimates the smoothness constant as `safety * max spectral norm` of the
/// objective Hessian over `n_samples` points in the radius ball around
/// `theta*`, plus the center itself.
pub fn estimate_l1(
    mdp: &Mdp,
    tau: f64,
    soft: &SoftSolution,
    n_samples: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    let center = soft.theta_star.flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![center.clone()];
    for _ in 0..n_samples {
        points.push(sample_in_ball(&center, radius, &mut rng));
    }
    let (s, a) = (soft.theta_star.n_states(), soft.theta_star.n_actions());
    l1_from_hessians(&points, |p| hessian(mdp, &PolicyParams::from_flat(p, s, a), tau, 0.0))
}

/// Shared core of [`estimate_l1`]: max spectral norm over sampled Hessians,
/// scaled by the safety factor. Exposed separately so synthetic objectives
/// can exercise the same path.
pub fn l1_from_hessians<F>(points: &[DVector<f64>], mut hessian_at: F) -> Result<f64>
where
    F: FnMut(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    let mut max_norm: f64 = 0.0;
    for p in points {
        let h = hessian_at(p)?;
        max_norm = max_norm.max(spectral_norm_sym(&h, SPECTRAL_TOL, 100_000));
    }
    if !(max_norm.is_finite() && max_norm > 0.0) {
        return Err(Error::Numerical(format!("degenerate max Hessian norm {max_norm}")));
    }
    Ok(L1_SAFETY_FACTOR * max_norm)
}

/// The non-uniform PL constant
/// `mu(theta) = 2 tau / S * min_s rho(s) * min_{s,a} pi(a|s)^2 / |d*/rho|_inf`.
pub fn pl_constant(mdp: &Mdp, theta: &PolicyParams, tau: f64, soft: &SoftSolution) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("pl_constant requires tau > 0, got {tau}")));
    }
    let pi = softmax_policy(theta);
    let min_pi = pi.min_prob();
    Ok(pl_constant_from_min_prob(mdp, tau, soft, min_pi)?)
}

/// Same constant from a precomputed `min_{s,a} pi(a|s)`, so per-ensemble
/// infima reuse the theta-independent factors.
pub fn pl_constant_from_min_prob(mdp: &Mdp, tau: f64, soft: &SoftSolution, min_pi: f64) -> Result<f64> {
    let d_star = visitation(mdp, &soft.pi_star)?;
    let ratio_inf = (0..mdp.n_states)
        .map(|s| d_star[s] / mdp.init_dist[s])
        .fold(f64::NEG_INFINITY, f64::max);
    let min_rho = mdp.init_dist.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(2.0 * tau / mdp.n_states as f64 * min_rho * min_pi * min_pi / ratio_inf)
}

fn t0_lower_bounds(l1: f64, mu: f64, sigma: f64, eta: f64, epsilon: f64, delta_init: f64, b0: f64, c0: f64) -> [f64; 3] {
    let margin = (mu * eta - 1.0) - b0 * c0 * eta * eta;
    [
        eta * eta * l1 / margin - 1.0,
        l1 * eta - 2.0,
        (3.0 * sigma * sigma / (2.0 * epsilon * delta_init)).sqrt() - 1.0,
    ]
}

/// Derives the full constant ledger, choosing the smallest admissible `t0`
/// and the smallest `K` over `t = 1..=t_max`.
#[allow(clippy::too_many_arguments)]
pub fn lemma5_constants(
    l1: f64,
    mu: f64,
    sigma: f64,
    c_universal: f64,
    eta: f64,
    epsilon: f64,
    delta_init: f64,
    dim: usize,
    t_max: usize,
    gap1: f64,
) -> Result<TheoryConstants> {
    derive_constants(l1, mu, sigma, c_universal, eta, epsilon, delta_init, dim, t_max, gap1, None)
}

/// Like [`lemma5_constants`] but validates a caller-fixed `t0` (the one the
/// step schedule actually used) instead of deriving the smallest one.
#[allow(clippy::too_many_arguments)]
pub fn lemma5_constants_with_t0(
    l1: f64,
    mu: f64,
    sigma: f64,
    c_universal: f64,
    eta: f64,
    epsilon: f64,
    delta_init: f64,
    dim: usize,
    t_max: usize,
    gap1: f64,
    t0: usize,
) -> Result<TheoryConstants> {
    derive_constants(l1, mu, sigma, c_universal, eta, epsilon, delta_init, dim, t_max, gap1, Some(t0))
}

#[allow(clippy::too_many_arguments)]
fn derive_constants(
    l1: f64,
    mu: f64,
    sigma: f64,
    c_universal: f64,
    eta: f64,
    epsilon: f64,
    delta_init: f64,
    dim: usize,
    t_max: usize,
    gap1: f64,
    fixed_t0: Option<usize>,
) -> Result<TheoryConstants> {
    if gap1 < 0.0 {
        return Err(Error::Infeasible { constraint: format!("gap1 >= 0 (got {gap1})") });
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Infeasible { constraint: format!("epsilon in (0,1) (got {epsilon})") });
    }
    if delta_init <= 0.0 {
        return Err(Error::Infeasible {
            constraint: format!("delta_init > 0 required by the t0 bound (got {delta_init})"),
        });
    }
    let c_m = (sigma * (dim as f64).sqrt() * c_universal).powi(2);
    if !(mu * eta - 1.0 > sigma * sigma / c_m) {
        return Err(Error::Infeasible {
            constraint: format!(
                "(mu*eta - 1) > sigma^2/C_M: mu*eta-1 = {:.6e}, sigma^2/C_M = {:.6e}",
                mu * eta - 1.0,
                sigma * sigma / c_m
            ),
        });
    }
    let b0 = 1.0 / (2.0 * eta * eta * l1 * c_m);
    let c0 = 2.0 * l1 * sigma * sigma;
    let bounds = t0_lower_bounds(l1, mu, sigma, eta, epsilon, delta_init, b0, c0);
    let names = ["t0: step-feasibility bound", "t0: L1*eta - 2", "t0: sqrt(3 sigma^2 / (2 eps Delta)) - 1"];
    let (bind_idx, &max_bound) = bounds
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("three bounds");
    let derived_t0 = max_bound.ceil().max(0.0) as usize;
    let mut binding = vec![names[bind_idx].to_string()];
    let t0 = match fixed_t0 {
        Some(t0) => {
            if (t0 as f64) < max_bound {
                return Err(Error::Infeasible {
                    constraint: format!("provided t0 = {t0} below required {max_bound:.6} ({})", names[bind_idx]),
                });
            }
            binding.push(format!("t0 fixed by caller at {t0}"));
            t0
        }
        None => derived_t0,
    };

    let mut constants = TheoryConstants {
        l1,
        mu,
        sigma,
        c_universal,
        c_m,
        b0,
        c0,
        eta,
        t0,
        k_const: 0.0,
        epsilon,
        delta_init,
        dim,
        gap1,
        binding_constraints: binding,
    };

    // K = max over the two constant terms and the per-t recursion term.
    let mut k = 1.0 / b0;
    let mut k_name = "K: 1/B0";
    let warm = (t0 as f64 + 1.0) * gap1;
    if warm > k {
        k = warm;
        k_name = "K: (t0+1)*gap1";
    }
    for t in 1..=t_max {
        let coeff = constants.mgf_coefficient(t);
        if !(0.0..1.0).contains(&coeff) {
            return Err(Error::Infeasible {
                constraint: format!("a_t + B0*C0*b_t^2 in [0,1) violated at t={t} (got {coeff})"),
            });
        }
        let term = 2.0 * constants.c_t(t) * c_m / (1.0 - coeff);
        if term > k {
            k = term;
            k_name = "K: recursion term";
        }
    }
    constants.k_const = k;
    constants.binding_constraints.push(k_name.to_string());
    Ok(constants)
}

/// The exponential tail bound `min(1, exp(1 - (t+t0+1) delta / K))`.
pub fn exp_bound(constants: &TheoryConstants, t: usize, delta: f64) -> f64 {
    exp_bound_raw(constants, t, delta).exp().min(1.0)
}

/// The raw exponent `1 - (t+t0+1) delta / K`, for log-scale reporting.
pub fn exp_bound_raw(constants: &TheoryConstants, t: usize, delta: f64) -> f64 {
    assert!(t >= 1, "bound is stated for t >= 1");
    assert!(delta >= 0.0, "delta must be nonnegative");
    1.0 - (t + constants.t0 + 1) as f64 * delta / constants.k_const
}

/// One step's verdict from the pathwise recursion checks.
#[derive(Debug, Clone, Serialize)]
pub struct RecursionViolation {
    pub step: usize,
    pub which: String,
    pub lhs: f64,
    pub rhs: f64,
}

/// Report of [`check_recursion`] over a full trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct RecursionReport {
    pub steps_checked: usize,
    pub violations: Vec<RecursionViolation>,
}

impl RecursionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first_violation(&self) -> Option<&RecursionViolation> {
        self.violations.first()
    }
}

/// Verifies, at every recorded step, the value-gap recursion
///
/// `gap_{t+1} <= (1 - mu eta_t + mu eta_t^2 L1) gap_t + eta_t <g_t, Z_t> + eta_t^2 L1 |Z_t|^2`
///
/// (with `mu` the running minimum of `mu(theta_l)` over `l <= t`) and the
/// distance recursion
///
/// `|theta_{t+1}-theta*| <= gamma_t |theta_t-theta*| + eta_t |Z_t|`,
/// `gamma_t = (1 + eta_t L1 + eta_t L1^2/mu(theta_t) + eta_t^2 L1^2)^{1/2}`,
///
/// recomputing every exact quantity from the MDP.
pub fn check_recursion(
    trajectory: &Trajectory,
    constants: &TheoryConstants,
    mdp: &Mdp,
    tau: f64,
    soft: &SoftSolution,
) -> Result<RecursionReport> {
    let steps = trajectory.noises.len();
    if trajectory.thetas.len() != steps + 1 || trajectory.gaps.len() != steps + 1 {
        return Err(Error::Domain("trajectory lengths are inconsistent".into()));
    }
    let theta_star = soft.theta_star.flat();
    let mut violations = Vec::new();
    let mut running_mu = f64::INFINITY;
    // Float slack for comparing recomputed quantities.
    let slack = |scale: f64| 1e-9 * scale.abs().max(1.0);

    for t in 1..=steps {
        let theta_t = &trajectory.thetas[t - 1];
        let z_t = &trajectory.noises[t - 1];
        let eta_t = trajectory.schedule.step_size(t);
        let g = flatten(&exact_gradient(mdp, theta_t, tau)?);
        let mu_t = pl_constant(mdp, theta_t, tau, soft)?;
        running_mu = running_mu.min(mu_t);

        let gap_t = trajectory.gaps[t - 1];
        let gap_next = trajectory.gaps[t];
        let contraction = 1.0 - running_mu * eta_t + running_mu * eta_t * eta_t * constants.l1;
        let rhs_gap = contraction * gap_t + eta_t * g.dot(z_t) + eta_t * eta_t * constants.l1 * z_t.norm_squared();
        if gap_next > rhs_gap + slack(rhs_gap) {
            violations.push(RecursionViolation {
                step: t,
                which: "value-gap recursion".into(),
                lhs: gap_next,
                rhs: rhs_gap,
            });
        }

        let dist_t = (theta_t.flat() - &theta_star).norm();
        let dist_next = (trajectory.thetas[t].flat() - &theta_star).norm();
        let gamma_t = (1.0 + eta_t * constants.l1
            + eta_t * constants.l1 * constants.l1 / mu_t
            + eta_t * eta_t * constants.l1 * constants.l1)
            .sqrt();
        let rhs_dist = gamma_t * dist_t + eta_t * z_t.norm();
        if dist_next > rhs_dist + slack(rhs_dist) {
            violations.push(RecursionViolation {
                step: t,
                which: "theta-distance recursion".into(),
                lhs: dist_next,
                rhs: rhs_dist,
            });
        }
    }
    Ok(RecursionReport { steps_checked: steps, violations })
}
