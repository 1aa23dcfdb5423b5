//! Exact tabular MDP computations: regularized policy evaluation, soft value
//! iteration, discounted visitation measures, advantages, exact policy
//! gradients, and finite-difference Hessians.
//!
//! The regularizer follows the entropy-bonus convention for cost
//! minimization: the per-stage regularized cost is
//! `c~(s,a) = c(s,a) + tau * log pi(a|s)`, so the soft-optimal policy is
//! strictly interior and has a finite softmax parameter `theta* = -Q*/tau`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{flatten, unflatten};
use crate::parametrization::softmax_policy;

/// Default sup-norm Bellman residual target for soft value iteration.
pub const DEFAULT_SOLVE_TOL: f64 = 1e-12;
/// Default iteration cap for soft value iteration.
pub const DEFAULT_SOLVE_MAX_ITER: usize = 1_000_000;
/// Gradient infinity-norm threshold certifying stationarity of `theta*`.
pub const STATIONARITY_TOL: f64 = 1e-8;
/// Row-sum / distribution-sum tolerance for stochastic inputs.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// A finite discounted MDP: states, actions, transition kernel, per-stage
/// costs, discount factor, and initial state distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a]` is a probability vector over next states.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `cost[s][a]` is the per-stage cost, finite.
    pub cost: Vec<Vec<f64>>,
    /// Discount factor in (0, 1).
    pub discount: f64,
    /// Initial state distribution, entrywise positive.
    pub init_dist: Vec<f64>,
}

/// Softmax policy parameters, an `S x A` real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    theta: DMatrix<f64>,
}

/// A stationary stochastic policy: each row is a distribution over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: DMatrix<f64>,
}

/// Output of regularized policy evaluation.
#[derive(Debug, Clone)]
pub struct PolicyValue {
    /// State values of the regularized objective.
    pub v: DVector<f64>,
    /// State-action values `q(s,a) = c(s,a) + gamma * <P(s,a,.), v>`.
    pub q: DMatrix<f64>,
    /// Scalar objective `<rho, v>`.
    pub v_rho: f64,
}

/// The soft-optimal solution of the entropy-regularized MDP.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub v_star: DVector<f64>,
    pub q_star: DMatrix<f64>,
    pub pi_star: Policy,
    pub theta_star: PolicyParams,
    /// Sup-norm Bellman residual at termination.
    pub bellman_residual: f64,
    /// Infinity norm of the exact gradient at `theta_star`.
    pub grad_inf_norm: f64,
    /// `<rho, v_star>`, cached for gap computations.
    pub v_rho_star: f64,
}

/// One invariant violation found by [`validate_mdp`].
#[derive(Debug, Clone, Serialize)]
pub struct InvariantFailure {
    pub invariant: String,
    pub index: String,
    pub detail: String,
}

/// Pass/fail report over all MDP invariants.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub failures: Vec<InvariantFailure>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl PolicyParams {
    pub fn new(theta: DMatrix<f64>) -> Result<Self> {
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("policy parameters must be finite".into()));
        }
        Ok(Self { theta })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self { theta: DMatrix::zeros(n_states, n_actions) }
    }

    pub fn from_flat(v: &DVector<f64>, n_states: usize, n_actions: usize) -> Self {
        Self { theta: unflatten(v, n_states, n_actions) }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn flat(&self) -> DVector<f64> {
        flatten(&self.theta)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn n_states(&self) -> usize {
        self.theta.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.theta.ncols()
    }
}

impl Policy {
    /// Wraps a row-stochastic matrix, checking row sums and nonnegativity.
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for s in 0..probs.nrows() {
            let mut sum = 0.0;
            for a in 0..probs.ncols() {
                let p = probs[(s, a)];
                if !(p.is_finite() && p >= 0.0) {
                    return Err(Error::Domain(format!("policy entry ({s},{a}) = {p} invalid")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Domain(format!("policy row {s} sums to {sum}, expected 1")));
            }
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_rows_unchecked(probs: DMatrix<f64>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

impl Mdp {
    /// Validates and returns the MDP, or the first invariant violation.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<Vec<Vec<f64>>>,
        cost: Vec<Vec<f64>>,
        discount: f64,
        init_dist: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self { n_states, n_actions, transition, cost, discount, init_dist };
        let report = validate_mdp(&mdp);
        if let Some(f) = report.failures.first() {
            return Err(Error::Domain(format!("{} at {}: {}", f.invariant, f.index, f.detail)));
        }
        Ok(mdp)
    }

    pub fn dim(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// Reads an MDP from its JSON document representation.
    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: Mdp = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad MDP json: {e}")))?;
        let report = validate_mdp(&mdp);
        if let Some(f) = report.failures.first() {
            return Err(Error::Config(format!("invalid MDP: {} at {}: {}", f.invariant, f.index, f.detail)));
        }
        Ok(mdp)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP serializes")
    }

    /// Seeded random MDP with strictly positive transition rows and initial
    /// distribution, costs in [-1, 1].
    pub fn random(n_states: usize, n_actions: usize, discount: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let floor = 0.05 / n_states as f64;
        let simplex = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let raw: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + floor).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect()
        };
        let transition = (0..n_states)
            .map(|_| (0..n_actions).map(|_| simplex(&mut rng)).collect())
            .collect();
        let cost = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let init_dist = simplex(&mut rng);
        Self { n_states, n_actions, transition, cost, discount, init_dist }
    }

    fn rho(&self) -> DVector<f64> {
        DVector::from_vec(self.init_dist.clone())
    }

    /// State-to-state kernel induced by a policy.
    fn policy_kernel(&self, policy: &Policy) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_states, |s, s2| {
            (0..self.n_actions).map(|a| policy.prob(s, a) * self.transition[s][a][s2]).sum()
        })
    }
}

/// Checks every MDP invariant and reports each violation with its index.
pub fn validate_mdp(mdp: &Mdp) -> ValidationReport {
    let mut failures = Vec::new();
    let mut fail = |invariant: &str, index: String, detail: String| {
        failures.push(InvariantFailure { invariant: invariant.into(), index, detail });
    };

    if mdp.n_states == 0 || mdp.n_actions == 0 {
        fail("positive dimensions", "-".into(), format!("S={}, A={}", mdp.n_states, mdp.n_actions));
    }
    if !(mdp.discount > 0.0 && mdp.discount < 1.0) {
        fail("discount in (0,1)", "-".into(), format!("gamma={}", mdp.discount));
    }
    if mdp.transition.len() != mdp.n_states {
        fail("transition shape", "-".into(), format!("{} rows, expected {}", mdp.transition.len(), mdp.n_states));
    }
    for (s, per_state) in mdp.transition.iter().enumerate() {
        if per_state.len() != mdp.n_actions {
            fail("transition shape", format!("s={s}"), format!("{} actions", per_state.len()));
            continue;
        }
        for (a, row) in per_state.iter().enumerate() {
            if row.len() != mdp.n_states {
                fail("transition shape", format!("s={s},a={a}"), format!("{} entries", row.len()));
                continue;
            }
            if let Some((i, &p)) = row.iter().enumerate().find(|(_, &p)| !(p.is_finite() && p >= 0.0)) {
                fail("transition nonnegative", format!("s={s},a={a},s'={i}"), format!("p={p}"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                fail("transition row sum", format!("s={s},a={a}"), format!("sum={sum}"));
            }
        }
    }
    if mdp.cost.len() != mdp.n_states || mdp.cost.iter().any(|r| r.len() != mdp.n_actions) {
        fail("cost shape", "-".into(), "cost matrix shape mismatch".into());
    }
    for (s, row) in mdp.cost.iter().enumerate() {
        for (a, &c) in row.iter().enumerate() {
            if !c.is_finite() {
                fail("cost finite", format!("s={s},a={a}"), format!("c={c}"));
            }
        }
    }
    if mdp.init_dist.len() != mdp.n_states {
        fail("init_dist shape", "-".into(), format!("{} entries", mdp.init_dist.len()));
    } else {
        let sum: f64 = mdp.init_dist.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            fail("init_dist sum", "-".into(), format!("sum={sum}"));
        }
        for (s, &p) in mdp.init_dist.iter().enumerate() {
            if !(p.is_finite() && p > 0.0) {
                fail("init_dist strictly positive", format!("s={s}"), format!("rho={p}"));
            }
        }
    }
    ValidationReport { failures }
}

/// Regularized per-stage cost `c~(s,a) = c(s,a) + tau * log pi(a|s)`.
fn regularized_cost(mdp: &Mdp, policy: &Policy, tau: f64) -> Result<DMatrix<f64>> {
    let mut c = DMatrix::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let p = policy.prob(s, a);
            if tau > 0.0 && p <= 0.0 {
                return Err(Error::Domain(format!(
                    "tau > 0 requires a strictly positive policy, pi({a}|{s}) = {p}"
                )));
            }
            c[(s, a)] = mdp.cost[s][a] + if tau > 0.0 { tau * p.ln() } else { 0.0 };
        }
    }
    Ok(c)
}

/// Evaluates the entropy-regularized objective of a policy.
///
/// Solves the linear system `(I - gamma * P_pi) v = c~_pi` exactly, then
/// forms `q(s,a) = c(s,a) + gamma * <P(s,a,.), v>` and the scalar
/// `<rho, v>`. With `tau = 0` this is plain policy evaluation.
pub fn policy_value(mdp: &Mdp, policy: &Policy, tau: f64) -> Result<PolicyValue> {
    if tau < 0.0 {
        return Err(Error::Domain(format!("tau must be nonnegative, got {tau}")));
    }
    let c_reg = regularized_cost(mdp, policy, tau)?;
    let c_pi = DVector::from_fn(mdp.n_states, |s, _| {
        (0..mdp.n_actions).map(|a| policy.prob(s, a) * c_reg[(s, a)]).sum()
    });
    let p_pi = mdp.policy_kernel(policy);
    let system = DMatrix::identity(mdp.n_states, mdp.n_states) - p_pi * mdp.discount;
    let v = system
        .lu()
        .solve(&c_pi)
        .expect("I - gamma*P_pi is nonsingular for gamma < 1");
    let q = DMatrix::from_fn(mdp.n_states, mdp.n_actions, |s, a| {
        mdp.cost[s][a]
            + mdp.discount * (0..mdp.n_states).map(|s2| mdp.transition[s][a][s2] * v[s2]).sum::<f64>()
    });
    let v_rho = mdp.rho().dot(&v);
    Ok(PolicyValue { v, q, v_rho })
}

/// Soft value iteration to the soft-optimal solution.
///
/// Iterates `v(s) <- -tau * log sum_a exp(-(c(s,a) + gamma <P, v>) / tau)`
/// (log-sum-exp with max subtraction) until the sup-norm Bellman residual
/// drops below `tol`, then reads off `theta* = -Q*/tau` and the softmax
/// policy it induces.
pub fn soft_optimal(mdp: &Mdp, tau: f64, tol: f64, max_iter: usize) -> Result<SoftSolution> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("soft_optimal requires tau > 0, got {tau}")));
    }
    let backup = |v: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(mdp.n_states, |s, _| {
            let q: Vec<f64> = (0..mdp.n_actions)
                .map(|a| {
                    mdp.cost[s][a]
                        + mdp.discount
                            * (0..mdp.n_states).map(|s2| mdp.transition[s][a][s2] * v[s2]).sum::<f64>()
                })
                .collect();
            soft_min(&q, tau)
        })
    };

    let mut v = DVector::zeros(mdp.n_states);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let next = backup(&v);
        residual = (&next - &v).amax();
        v = next;
        if residual < tol {
            break;
        }
    }
    if residual >= tol {
        return Err(Error::Convergence { residual, iterations: max_iter });
    }

    let q_star = DMatrix::from_fn(mdp.n_states, mdp.n_actions, |s, a| {
        mdp.cost[s][a]
            + mdp.discount * (0..mdp.n_states).map(|s2| mdp.transition[s][a][s2] * v[s2]).sum::<f64>()
    });
    let theta_star = PolicyParams::new(-&q_star / tau)?;
    let pi_star = softmax_policy(&theta_star);
    let v_rho_star = mdp.rho().dot(&v);
    let grad = exact_gradient(mdp, &theta_star, tau)?;
    let grad_inf_norm = grad.amax();
    Ok(SoftSolution {
        v_star: v,
        q_star,
        pi_star,
        theta_star,
        bellman_residual: residual,
        grad_inf_norm,
        v_rho_star,
    })
}

/// `-tau * log sum_a exp(-x_a / tau)` with max subtraction.
fn soft_min(xs: &[f64], tau: f64) -> f64 {
    let m = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let sum: f64 = xs.iter().map(|x| (-(x - m) / tau).exp()).sum();
    m - tau * sum.ln()
}

/// Discounted state-visitation probability vector
/// `d = (1 - gamma) * rho^T (I - gamma P_pi)^{-1}`, renormalized to sum one.
pub fn visitation(mdp: &Mdp, policy: &Policy) -> Result<DVector<f64>> {
    let p_pi = mdp.policy_kernel(policy);
    let system = (DMatrix::identity(mdp.n_states, mdp.n_states) - p_pi * mdp.discount).transpose();
    let x = system
        .lu()
        .solve(&mdp.rho())
        .expect("I - gamma*P_pi^T is nonsingular for gamma < 1");
    let mut d = x * (1.0 - mdp.discount);
    let total: f64 = d.iter().sum();
    d /= total;
    Ok(d)
}

/// Soft advantage `A(s,a) = q(s,a) + tau * log pi(a|s) - v(s)` at the softmax
/// policy of `theta`. Satisfies `sum_a pi(a|s) A(s,a) = 0` per state.
pub fn soft_advantage(mdp: &Mdp, theta: &PolicyParams, tau: f64) -> Result<DMatrix<f64>> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("soft_advantage requires tau > 0, got {tau}")));
    }
    let policy = softmax_policy(theta);
    let pv = policy_value(mdp, &policy, tau)?;
    Ok(advantage_from_value(&policy, &pv, tau))
}

fn advantage_from_value(policy: &Policy, pv: &PolicyValue, tau: f64) -> DMatrix<f64> {
    DMatrix::from_fn(pv.q.nrows(), pv.q.ncols(), |s, a| {
        pv.q[(s, a)] + tau * policy.prob(s, a).ln() - pv.v[s]
    })
}

/// Exact policy gradient of the regularized objective at `theta`:
/// `g(s,a) = d(s) * pi(a|s) * A(s,a) / (1 - gamma)`.
pub fn exact_gradient(mdp: &Mdp, theta: &PolicyParams, tau: f64) -> Result<DMatrix<f64>> {
    gradient_and_value(mdp, theta, tau).map(|(g, _)| g)
}

/// Gradient plus the scalar objective, sharing one policy evaluation.
pub fn gradient_and_value(mdp: &Mdp, theta: &PolicyParams, tau: f64) -> Result<(DMatrix<f64>, f64)> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("exact_gradient requires tau > 0, got {tau}")));
    }
    let policy = softmax_policy(theta);
    let pv = policy_value(mdp, &policy, tau)?;
    let adv = advantage_from_value(&policy, &pv, tau);
    let d = visitation(mdp, &policy)?;
    let scale = 1.0 / (1.0 - mdp.discount);
    let g = DMatrix::from_fn(mdp.n_states, mdp.n_actions, |s, a| {
        scale * d[s] * policy.prob(s, a) * adv[(s, a)]
    });
    Ok((g, pv.v_rho))
}

/// Objective value `V_tau^theta(rho)` at a softmax parameter.
pub fn objective(mdp: &Mdp, theta: &PolicyParams, tau: f64) -> Result<f64> {
    let policy = softmax_policy(theta);
    Ok(policy_value(mdp, &policy, tau)?.v_rho)
}

/// Hessian of the regularized objective in flattened coordinates, by central
/// finite differences of the exact gradient, symmetrized as `(H + H^T)/2`.
///
/// `fd_step <= 0` selects the default `1e-5 * max(1, |theta|_inf)`.
pub fn hessian(mdp: &Mdp, theta: &PolicyParams, tau: f64, fd_step: f64) -> Result<DMatrix<f64>> {
    let d = theta.dim();
    let h = if fd_step > 0.0 { fd_step } else { 1e-5 * theta.matrix().amax().max(1.0) };
    let base = theta.flat();
    let mut hess = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut plus = base.clone();
        plus[k] += h;
        let mut minus = base.clone();
        minus[k] -= h;
        let gp = exact_gradient(mdp, &PolicyParams::from_flat(&plus, theta.n_states(), theta.n_actions()), tau)?;
        let gm = exact_gradient(mdp, &PolicyParams::from_flat(&minus, theta.n_states(), theta.n_actions()), tau)?;
        let col = (flatten(&gp) - flatten(&gm)) / (2.0 * h);
        hess.set_column(k, &col);
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    if sym.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite entry in finite-difference Hessian".into()));
    }
    Ok(sym)
}

/// Per-state shift direction: 1 on row `s`, 0 elsewhere, flattened.
pub fn shift_direction(n_states: usize, n_actions: usize, s: usize) -> DVector<f64> {
    let mut m = DMatrix::zeros(n_states, n_actions);
    for a in 0..n_actions {
        m[(s, a)] = 1.0;
    }
    flatten(&m)
}
