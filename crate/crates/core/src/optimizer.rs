//! The stochastic policy-gradient iteration with decaying step sizes,
//! gradient-noise models, and an optional rollout-based gradient estimator.
//!
//! The primary mode injects noise on the exact gradient: at each step a
//! zero-mean vector `Z_t` is drawn from the model's conditional law and the
//! update uses `g(theta_t) - Z_t`. The rollout estimator is a secondary
//! mode whose noise is empirical.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{gradient_and_value, Mdp, PolicyParams, SoftSolution};
use crate::numerics::{flatten, unflatten};
use crate::parametrization::softmax_policy;

/// Iterates with infinity norm beyond this are treated as divergent.
pub const DIVERGENCE_GUARD: f64 = 1e8;

/// Decaying step-size schedule `eta_t = eta / (t + t0 + 1)`, `t >= 1`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct StepSchedule {
    pub eta: f64,
    pub t0: usize,
}

impl StepSchedule {
    pub fn new(eta: f64, t0: usize) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Domain(format!("eta must be positive, got {eta}")));
        }
        Ok(Self { eta, t0 })
    }

    pub fn step_size(&self, t: usize) -> f64 {
        self.eta / (t + self.t0 + 1) as f64
    }
}

/// Gradient-noise distribution kinds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseKind {
    GaussianIsotropic { sigma: f64 },
    GaussianDiagonal { sigmas: Vec<f64> },
    TruncatedGaussian { sigma: f64, radius: f64 },
    TrajectoryEstimator { n_rollouts: usize, horizon: usize },
}

/// A gradient-noise model: sampling plus the analytic quantities the rate
/// analysis consumes (sub-Gaussian sigma, conditional LMGF, LMGF Lipschitz
/// constant in theta).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseModel {
    #[serde(flatten)]
    pub kind: NoiseKind,
    /// sigma such that the conditional LMGF is bounded by sigma^2 |l|^2 / 2.
    pub sub_gaussian_sigma: f64,
    /// Lipschitz constant of the conditional LMGF in theta; zero for all
    /// theta-independent kinds.
    pub lmgf_lipschitz: f64,
}

impl NoiseModel {
    pub fn gaussian_isotropic(sigma: f64) -> Self {
        Self { kind: NoiseKind::GaussianIsotropic { sigma }, sub_gaussian_sigma: sigma, lmgf_lipschitz: 0.0 }
    }

    pub fn gaussian_diagonal(sigmas: Vec<f64>) -> Self {
        let max = sigmas.iter().cloned().fold(0.0, f64::max);
        Self { kind: NoiseKind::GaussianDiagonal { sigmas }, sub_gaussian_sigma: max, lmgf_lipschitz: 0.0 }
    }

    /// Componentwise symmetric truncation keeps the parent sigma valid as a
    /// sub-Gaussian constant (mass moves toward the center).
    pub fn truncated_gaussian(sigma: f64, radius: f64) -> Self {
        Self { kind: NoiseKind::TruncatedGaussian { sigma, radius }, sub_gaussian_sigma: sigma, lmgf_lipschitz: 0.0 }
    }

    /// Rollout-based estimator noise; `sigma` must be supplied (estimated
    /// empirically) since the law has no closed form.
    pub fn trajectory_estimator(n_rollouts: usize, horizon: usize, sigma: f64) -> Self {
        Self {
            kind: NoiseKind::TrajectoryEstimator { n_rollouts, horizon },
            sub_gaussian_sigma: sigma,
            lmgf_lipschitz: f64::NAN,
        }
    }

    /// Closed-form conditional LMGF `Lambda(lambda)` where one exists.
    /// The analytic kinds are theta-independent.
    pub fn lmgf(&self, lambda: &DVector<f64>) -> Option<f64> {
        match &self.kind {
            NoiseKind::GaussianIsotropic { sigma } => Some(0.5 * sigma * sigma * lambda.norm_squared()),
            NoiseKind::GaussianDiagonal { sigmas } => {
                if sigmas.len() != lambda.len() {
                    return None;
                }
                Some(0.5 * lambda.iter().zip(sigmas).map(|(l, s)| (l * s).powi(2)).sum::<f64>())
            }
            NoiseKind::TruncatedGaussian { sigma, radius } => {
                Some(lambda.iter().map(|&l| truncated_normal_lmgf_1d(l, *sigma, *radius)).sum())
            }
            NoiseKind::TrajectoryEstimator { .. } => None,
        }
    }

    /// Gradient of the closed-form LMGF, where one exists.
    pub fn lmgf_grad(&self, lambda: &DVector<f64>) -> Option<DVector<f64>> {
        match &self.kind {
            NoiseKind::GaussianIsotropic { sigma } => Some(lambda * (sigma * sigma)),
            NoiseKind::GaussianDiagonal { sigmas } => {
                if sigmas.len() != lambda.len() {
                    return None;
                }
                Some(DVector::from_fn(lambda.len(), |i, _| lambda[i] * sigmas[i] * sigmas[i]))
            }
            NoiseKind::TruncatedGaussian { sigma, radius } => {
                let h = 1e-6;
                Some(DVector::from_fn(lambda.len(), |i, _| {
                    (truncated_normal_lmgf_1d(lambda[i] + h, *sigma, *radius)
                        - truncated_normal_lmgf_1d(lambda[i] - h, *sigma, *radius))
                        / (2.0 * h)
                }))
            }
            NoiseKind::TrajectoryEstimator { .. } => None,
        }
    }

    /// Covariance matrix of the conditional law at `theta*`, where one
    /// exists in closed form (Gaussian kinds only).
    pub fn covariance(&self, dim: usize) -> Option<DMatrix<f64>> {
        match &self.kind {
            NoiseKind::GaussianIsotropic { sigma } => Some(DMatrix::<f64>::identity(dim, dim) * (sigma * sigma)),
            NoiseKind::GaussianDiagonal { sigmas } => {
                if sigmas.len() != dim {
                    return None;
                }
                Some(DMatrix::from_diagonal(&DVector::from_fn(dim, |i, _| sigmas[i] * sigmas[i])))
            }
            _ => None,
        }
    }
}

/// log E[exp(l Z)] for Z ~ N(0, sigma^2) truncated to [-r, r].
fn truncated_normal_lmgf_1d(l: f64, sigma: f64, r: f64) -> f64 {
    if sigma == 0.0 || l == 0.0 {
        return 0.0;
    }
    let phi = |x: f64| 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2);
    let a = r / sigma;
    let num = phi(a - l * sigma) - phi(-a - l * sigma);
    let den = phi(a) - phi(-a);
    0.5 * l * l * sigma * sigma + (num / den).ln()
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u: f64 = rng.gen::<f64>().max(1e-300);
    let v: f64 = rng.gen::<f64>();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// Draws one noise vector `Z` of dimension `d = S*A` from the model's
/// conditional law given `theta`. For the rollout kind,
/// `Z = g(theta) - g_hat(theta)`.
pub fn sample_noise(
    model: &NoiseModel,
    mdp: &Mdp,
    tau: f64,
    theta: &PolicyParams,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>> {
    let d = theta.dim();
    match &model.kind {
        NoiseKind::GaussianIsotropic { sigma } => {
            Ok(DVector::from_fn(d, |_, _| sigma * standard_normal(rng)))
        }
        NoiseKind::GaussianDiagonal { sigmas } => {
            if sigmas.len() != d {
                return Err(Error::Domain(format!(
                    "diagonal noise has {} sigmas for dimension {d}",
                    sigmas.len()
                )));
            }
            Ok(DVector::from_fn(d, |i, _| sigmas[i] * standard_normal(rng)))
        }
        NoiseKind::TruncatedGaussian { sigma, radius } => {
            if *sigma > 0.0 && *radius <= 0.0 {
                return Err(Error::Domain("truncation radius must be positive".into()));
            }
            Ok(DVector::from_fn(d, |_, _| {
                if *sigma == 0.0 {
                    return 0.0;
                }
                loop {
                    let z = sigma * standard_normal(rng);
                    if z.abs() <= *radius {
                        return z;
                    }
                }
            }))
        }
        NoiseKind::TrajectoryEstimator { n_rollouts, horizon } => {
            let estimate = trajectory_gradient_estimate(mdp, theta, tau, *n_rollouts, *horizon, rng)?;
            let exact = crate::mdp::exact_gradient(mdp, theta, tau)?;
            Ok(flatten(&exact) - flatten(&estimate))
        }
    }
}

/// A recorded optimization run: iterates, value gaps, realized noises.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `theta_1, ..., theta_{T+1}`.
    pub thetas: Vec<PolicyParams>,
    /// `gap_t = V(theta_t) - V(theta*)`, one per iterate.
    pub gaps: Vec<f64>,
    /// Realized `Z_t`, one per update (length T).
    pub noises: Vec<DVector<f64>>,
    pub schedule: StepSchedule,
    pub seed: u64,
}

/// Runs `T` steps of `theta_{t+1} = theta_t - eta_t (g(theta_t) - Z_t)`.
///
/// Fully deterministic given `seed`. Returns a divergence error (carrying
/// the step index) if an iterate's infinity norm exceeds the guard.
pub fn sgd_run(
    mdp: &Mdp,
    tau: f64,
    soft: &SoftSolution,
    theta_init: &PolicyParams,
    schedule: StepSchedule,
    model: &NoiseModel,
    t_max: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, a) = (theta_init.n_states(), theta_init.n_actions());
    let mut theta = theta_init.clone();
    let mut thetas = Vec::with_capacity(t_max + 1);
    let mut gaps = Vec::with_capacity(t_max + 1);
    let mut noises = Vec::with_capacity(t_max);

    for t in 1..=t_max {
        let (grad, v_rho) = gradient_and_value(mdp, &theta, tau)?;
        thetas.push(theta.clone());
        gaps.push(v_rho - soft.v_rho_star);
        let z = sample_noise(model, mdp, tau, &theta, &mut rng)?;
        let eta_t = schedule.step_size(t);
        let next = theta.flat() - (flatten(&grad) - &z) * eta_t;
        noises.push(z);
        if next.amax() > DIVERGENCE_GUARD || next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step: t });
        }
        theta = PolicyParams::from_flat(&next, s, a);
    }
    let (_, v_rho) = gradient_and_value(mdp, &theta, tau)?;
    thetas.push(theta);
    gaps.push(v_rho - soft.v_rho_star);
    Ok(Trajectory { thetas, gaps, noises, schedule, seed })
}

/// REINFORCE-style estimate of the regularized policy gradient from
/// discounted rollouts truncated at `horizon`, averaged over `n_rollouts`.
///
/// The estimator is unbiased for the truncated objective; truncation
/// contributes a bias of order `gamma^horizon * max|c~| / (1 - gamma)`.
pub fn trajectory_gradient_estimate(
    mdp: &Mdp,
    theta: &PolicyParams,
    tau: f64,
    n_rollouts: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    if n_rollouts == 0 || horizon == 0 {
        return Err(Error::Domain("n_rollouts and horizon must be >= 1".into()));
    }
    let policy = softmax_policy(theta);
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut acc = DVector::zeros(ns * na);

    let sample_index = |probs: &[f64], rng: &mut ChaCha8Rng| -> usize {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return i;
            }
        }
        probs.len() - 1
    };

    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut costs = Vec::with_capacity(horizon);
    for _ in 0..n_rollouts {
        states.clear();
        actions.clear();
        costs.clear();
        let mut s = sample_index(&mdp.init_dist, rng);
        let mut discount_k = 1.0;
        for _ in 0..horizon {
            let probs: Vec<f64> = (0..na).map(|a| policy.prob(s, a)).collect();
            let a = sample_index(&probs, rng);
            states.push(s);
            actions.push(a);
            costs.push(discount_k * (mdp.cost[s][a] + tau * policy.prob(s, a).ln()));
            discount_k *= mdp.discount;
            s = sample_index(&mdp.transition[s][a], rng);
        }
        // Discounted cost-to-go from each step.
        let mut togo = vec![0.0; horizon];
        let mut tail = 0.0;
        for k in (0..horizon).rev() {
            tail += costs[k];
            togo[k] = tail;
        }
        let mut discount_k = 1.0;
        for k in 0..horizon {
            let (s_k, a_k) = (states[k], actions[k]);
            // score(s', a') = delta_{s s'} (delta_{a a'} - pi(a'|s));
            // credit the cost-to-go plus the regularizer's own derivative.
            for a2 in 0..na {
                let score = (if a2 == a_k { 1.0 } else { 0.0 }) - policy.prob(s_k, a2);
                acc[s_k * na + a2] += score * (togo[k] + discount_k * tau);
            }
            discount_k *= mdp.discount;
        }
    }
    let flat = acc / n_rollouts as f64;
    Ok(unflatten(&flat, ns, na))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{exact_gradient, soft_optimal, Mdp};
    use approx::assert_relative_eq;

    fn setup() -> (Mdp, SoftSolution) {
        let mdp = Mdp::random(2, 2, 0.9, 42);
        let soft = soft_optimal(&mdp, 0.2, 1e-12, 1_000_000).unwrap();
        (mdp, soft)
    }

    #[test]
    fn zero_sigma_noise_is_zero() {
        let (mdp, soft) = setup();
        let model = NoiseModel::gaussian_isotropic(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = sample_noise(&model, &mdp, 0.2, &soft.theta_star, &mut rng).unwrap();
        assert_eq!(z.amax(), 0.0);
    }

    #[test]
    fn isotropic_noise_mean_is_near_zero() {
        let (mdp, soft) = setup();
        let model = NoiseModel::gaussian_isotropic(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut mean = DVector::zeros(4);
        for _ in 0..n {
            mean += sample_noise(&model, &mdp, 0.2, &soft.theta_star, &mut rng).unwrap();
        }
        mean /= n as f64;
        let clt = 3.0 * 0.1 / (n as f64).sqrt();
        assert!(mean.amax() < clt, "mean {} exceeds CLT bound {clt}", mean.amax());
    }

    #[test]
    fn truncated_noise_respects_radius() {
        let (mdp, soft) = setup();
        let model = NoiseModel::truncated_gaussian(1.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let z = sample_noise(&model, &mdp, 0.2, &soft.theta_star, &mut rng).unwrap();
            assert!(z.amax() <= 0.5);
        }
    }

    #[test]
    fn truncated_lmgf_at_zero_and_symmetry() {
        assert_eq!(truncated_normal_lmgf_1d(0.0, 1.0, 2.0), 0.0);
        let a = truncated_normal_lmgf_1d(0.7, 0.5, 1.0);
        let b = truncated_normal_lmgf_1d(-0.7, 0.5, 1.0);
        assert_relative_eq!(a, b, max_relative = 1e-12);
        // Truncation can only shrink the MGF below the Gaussian bound.
        assert!(a <= 0.5 * (0.7f64 * 0.5).powi(2) + 1e-15);
    }

    #[test]
    fn empirical_lmgf_obeys_sub_gaussian_bound() {
        let (mdp, soft) = setup();
        let model = NoiseModel::truncated_gaussian(0.3, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 50_000;
        let lambda = DVector::from_vec(vec![0.8, -0.4, 0.2, 0.6]);
        let mut acc = 0.0;
        for _ in 0..n {
            let z = sample_noise(&model, &mdp, 0.2, &soft.theta_star, &mut rng).unwrap();
            acc += lambda.dot(&z).exp();
        }
        let empirical = (acc / n as f64).ln();
        let bound = 0.5 * model.sub_gaussian_sigma.powi(2) * lambda.norm_squared();
        assert!(empirical <= bound + 0.01, "empirical {empirical} vs bound {bound}");
    }

    #[test]
    fn noiseless_descent_is_monotone() {
        let (mdp, soft) = setup();
        let theta1 = PolicyParams::from_flat(&(soft.theta_star.flat() + DVector::from_vec(vec![0.3, -0.2, 0.1, 0.25])), 2, 2);
        // eta_1 = 20/(0+19+1) = 1.0; small enough here.
        let schedule = StepSchedule::new(20.0, 19).unwrap();
        let model = NoiseModel::gaussian_isotropic(0.0);
        let traj = sgd_run(&mdp, 0.2, &soft, &theta1, schedule, &model, 400, 7).unwrap();
        for w in traj.gaps.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "gap increased: {} -> {}", w[0], w[1]);
        }
        assert!(traj.gaps.iter().all(|&g| g >= -1e-10));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (mdp, soft) = setup();
        let theta1 = PolicyParams::zeros(2, 2);
        let schedule = StepSchedule::new(30.0, 40).unwrap();
        let model = NoiseModel::gaussian_isotropic(0.05);
        let a = sgd_run(&mdp, 0.2, &soft, &theta1, schedule, &model, 200, 99).unwrap();
        let b = sgd_run(&mdp, 0.2, &soft, &theta1, schedule, &model, 200, 99).unwrap();
        assert_eq!(a.gaps, b.gaps);
        for (x, y) in a.thetas.iter().zip(&b.thetas) {
            assert_eq!(x.flat(), y.flat());
        }
        for (x, y) in a.noises.iter().zip(&b.noises) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn ensemble_mostly_improves() {
        let (mdp, soft) = setup();
        let offset = DVector::from_vec(vec![0.25, -0.15, 0.2, -0.1]);
        let theta1 = PolicyParams::from_flat(&(soft.theta_star.flat() + offset), 2, 2);
        let schedule = StepSchedule::new(30.0, 40).unwrap();
        let model = NoiseModel::gaussian_isotropic(0.05);
        let mut improved = 0;
        for i in 0..100 {
            let traj = sgd_run(&mdp, 0.2, &soft, &theta1, schedule, &model, 2000, 1000 + i).unwrap();
            if *traj.gaps.last().unwrap() < traj.gaps[0] {
                improved += 1;
            }
        }
        assert!(improved >= 99, "only {improved}/100 replicas improved");
    }

    #[test]
    fn rollout_estimator_agrees_with_exact_gradient() {
        let mdp = Mdp::random(2, 2, 0.9, 7);
        let theta = PolicyParams::from_flat(&DVector::from_vec(vec![0.4, -0.3, 0.1, 0.5]), 2, 2);
        let tau = 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let est = trajectory_gradient_estimate(&mdp, &theta, tau, n, 200, &mut rng).unwrap();
        let exact = exact_gradient(&mdp, &theta, tau).unwrap();
        // Componentwise agreement within 3 standard errors, estimated from a
        // second independent batch of per-rollout estimates.
        let mut rng2 = ChaCha8Rng::seed_from_u64(6);
        let batches = 200;
        let mut per_batch = Vec::with_capacity(batches);
        for _ in 0..batches {
            per_batch.push(trajectory_gradient_estimate(&mdp, &theta, tau, 50, 200, &mut rng2).unwrap());
        }
        for s in 0..2 {
            for a in 0..2 {
                let vals: Vec<f64> = per_batch.iter().map(|g| g[(s, a)]).collect();
                let mean: f64 = vals.iter().sum::<f64>() / batches as f64;
                let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
                // std error of the n-rollout mean
                let se = (var * 50.0 / n as f64).sqrt();
                let diff = (est[(s, a)] - exact[(s, a)]).abs();
                assert!(diff <= 3.0 * se + 1e-4, "entry ({s},{a}): diff {diff} vs 3se {}", 3.0 * se);
            }
        }
    }

    #[test]
    fn rollout_estimator_single_stage_limit() {
        // horizon 1 and gamma ~ 0: expectation is the gradient of the
        // single-stage regularized cost.
        let mdp = Mdp::new(
            2,
            2,
            vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ],
            vec![vec![0.2, -0.4], vec![0.7, 0.1]],
            1e-6,
            vec![0.5, 0.5],
        )
        .unwrap();
        let theta = PolicyParams::from_flat(&DVector::from_vec(vec![0.3, -0.1, 0.0, 0.4]), 2, 2);
        let tau = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let est = trajectory_gradient_estimate(&mdp, &theta, tau, 4_000_000, 1, &mut rng).unwrap();
        // Closed-form single-stage gradient: rho(s) pi(a|s) (c~(s,a) + tau - sum_b pi(b|s)(c~(s,b) + tau)).
        let policy = softmax_policy(&theta);
        let mut expect = DMatrix::zeros(2, 2);
        for s in 0..2 {
            let ct: Vec<f64> = (0..2).map(|a| mdp.cost[s][a] + tau * policy.prob(s, a).ln() + tau).collect();
            let mean: f64 = (0..2).map(|a| policy.prob(s, a) * ct[a]).sum();
            for a in 0..2 {
                expect[(s, a)] = mdp.init_dist[s] * policy.prob(s, a) * (ct[a] - mean);
            }
        }
        assert!((est - expect).amax() < 1e-3);
    }
}
