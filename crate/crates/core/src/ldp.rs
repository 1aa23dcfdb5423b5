//! The large-deviations core: limiting log-moment-generating function in
//! spectral form, its Legendre-Fenchel conjugate (the rate function),
//! region-infimum decay rates, and contraction-principle pushforwards to
//! other parametrizations.
//!
//! The softmax objective is invariant to per-state parameter shifts, so the
//! Hessian at the optimum carries an `S`-dimensional null space on which no
//! exponential decay exists. All rate computations project onto the
//! orthogonal complement of the numerical null space (the *retained*
//! subspace) and evaluate there.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{exact_gradient, Mdp, PolicyParams, SoftSolution};
use crate::numerics::gauss_legendre_unit;
use crate::optimizer::NoiseModel;
use crate::parametrization::ParamMap;
use crate::theory::TheoryConstants;

/// Eigenvalues below this are treated as the shift null space.
pub const DEFAULT_NULL_TOL: f64 = 1e-8;
/// Default number of Gauss-Legendre nodes.
pub const DEFAULT_QUAD_POINTS: usize = 64;
/// Iterate-norm guard marking an unbounded conjugate supremum.
const CONJUGATE_NORM_GUARD: f64 = 1e8;

/// Symmetric eigendecomposition of the Hessian at the optimum, with the
/// numerical null space marked.
#[derive(Debug, Clone)]
pub struct SpectralData {
    /// Orthogonal eigenvector matrix (columns), eigenvalues descending.
    pub q: DMatrix<f64>,
    /// Eigenvalues, descending.
    pub rho_eigs: DVector<f64>,
    /// True where the eigenvalue falls below the null tolerance.
    pub null_mask: Vec<bool>,
    pub null_tol: f64,
}

impl SpectralData {
    pub fn dim(&self) -> usize {
        self.rho_eigs.len()
    }

    pub fn retained_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| !self.null_mask[i]).collect()
    }

    pub fn retained_dim(&self) -> usize {
        self.null_mask.iter().filter(|&&m| !m).count()
    }

    /// Coordinates of `v` in the eigenbasis with null components zeroed.
    /// Returns the coordinates and whether anything was projected away.
    pub fn retained_coords(&self, v: &DVector<f64>) -> (DVector<f64>, bool) {
        let mut coords = self.q.transpose() * v;
        let mut projected = false;
        let scale = v.norm().max(1.0);
        for (i, &is_null) in self.null_mask.iter().enumerate() {
            if is_null {
                if coords[i].abs() > 1e-10 * scale {
                    projected = true;
                }
                coords[i] = 0.0;
            }
        }
        (coords, projected)
    }

    /// Orthogonal projection of `v` onto the retained subspace.
    pub fn project_retained(&self, v: &DVector<f64>) -> DVector<f64> {
        let (coords, _) = self.retained_coords(v);
        &self.q * coords
    }

    /// The `i`-th eigenvector.
    pub fn eigenvector(&self, i: usize) -> DVector<f64> {
        self.q.column(i).into_owned()
    }
}

/// Full symmetric eigendecomposition of a Hessian, eigenvalues sorted
/// descending, null mask from `null_tol`.
pub fn spectral(hessian_at_opt: &DMatrix<f64>, null_tol: f64) -> Result<SpectralData> {
    let n = hessian_at_opt.nrows();
    if hessian_at_opt.ncols() != n {
        return Err(Error::Domain("spectral expects a square matrix".into()));
    }
    let asym = (hessian_at_opt - hessian_at_opt.transpose()).amax();
    if asym > 1e-9 * hessian_at_opt.amax().max(1.0) {
        return Err(Error::Domain(format!("spectral expects a symmetric matrix, asymmetry {asym:.3e}")));
    }
    let eig = SymmetricEigen::new(hessian_at_opt.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rho_eigs = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut q = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        q.set_column(dst, &eig.eigenvectors.column(src));
    }
    if rho_eigs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("eigensolver produced non-finite eigenvalues".into()));
    }
    let null_mask = rho_eigs.iter().map(|&x| x < null_tol).collect();
    Ok(SpectralData { q, rho_eigs, null_mask, null_tol })
}

/// Parameters of the residual term `r(lambda)`: the LMGF-Lipschitz part and
/// a sampled table of the largest gradient-linearization residual
/// `hbar(delta) = sup_{|u| = delta} |g(theta* + u) - H(theta*) u|`.
#[derive(Debug, Clone)]
pub struct ResidualParams {
    pub l_lambda: f64,
    pub gamma_bar: f64,
    pub k_const: f64,
    pub l1: f64,
    /// `(delta, hbar(delta))` pairs, delta ascending, for interpolation.
    pub hbar_table: Vec<(f64, f64)>,
}

impl ResidualParams {
    /// Samples the residual table on a geometric grid of sphere radii.
    pub fn estimate(
        mdp: &Mdp,
        tau: f64,
        soft: &SoftSolution,
        hessian_at_opt: &DMatrix<f64>,
        noise: &NoiseModel,
        constants: &TheoryConstants,
        deltas: &[f64],
        samples_per_delta: usize,
        seed: u64,
    ) -> Result<Self> {
        let center = soft.theta_star.flat();
        let (s, a) = (soft.theta_star.n_states(), soft.theta_star.n_actions());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Vec::with_capacity(deltas.len());
        for &delta in deltas {
            let mut worst = 0.0f64;
            for _ in 0..samples_per_delta {
                let mut dir = DVector::from_fn(center.len(), |_, _| {
                    use rand::Rng;
                    rng.gen_range(-1.0..1.0)
                });
                let norm = dir.norm();
                if norm == 0.0 {
                    continue;
                }
                dir *= delta / norm;
                let theta = PolicyParams::from_flat(&(&center + &dir), s, a);
                let g = crate::numerics::flatten(&exact_gradient(mdp, &theta, tau)?);
                let resid = (&g - hessian_at_opt * &dir).norm();
                worst = worst.max(resid);
            }
            table.push((delta, worst));
        }
        table.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self {
            l_lambda: noise.lmgf_lipschitz,
            gamma_bar: constants.gamma_bar(),
            k_const: constants.k_const,
            l1: constants.l1,
            hbar_table: table,
        })
    }

    /// `delta_bar(lambda) = gamma_bar * |lambda| * K / L1`.
    pub fn delta_bar(&self, lambda_norm: f64) -> f64 {
        self.gamma_bar * lambda_norm * self.k_const / self.l1
    }

    /// Interpolated `hbar(delta)`; extrapolates linearly beyond the table.
    pub fn hbar(&self, delta: f64) -> f64 {
        let table = &self.hbar_table;
        if table.is_empty() {
            return 0.0;
        }
        if delta <= table[0].0 {
            return table[0].1 * delta / table[0].0.max(1e-300);
        }
        for w in table.windows(2) {
            if delta <= w[1].0 {
                let t = (delta - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + t * (w[1].1 - w[0].1);
            }
        }
        let last = table[table.len() - 1];
        let prev = table[table.len().saturating_sub(2)];
        let slope = if last.0 > prev.0 { (last.1 - prev.1) / (last.0 - prev.0) } else { 0.0 };
        last.1 + slope.max(0.0) * (delta - last.0)
    }

    /// `r(lambda) = 4 L_Lambda eta^2 |lambda|^2 delta_bar + 2 eta |lambda| hbar(delta_bar)`.
    pub fn residual(&self, eta: f64, lambda_norm: f64) -> f64 {
        let db = self.delta_bar(lambda_norm);
        4.0 * self.l_lambda * eta * eta * lambda_norm * lambda_norm * db
            + 2.0 * eta * lambda_norm * self.hbar(db)
    }
}

/// Which terms of the limiting LMGF to include.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiMode {
    /// Integral term only (`r = 0`); the reporting default.
    Leading,
    /// Adds the sampled residual term `r(lambda)`.
    WithResidual,
}

/// The limiting LMGF and its conjugate.
#[derive(Debug, Clone)]
pub struct RateFunction {
    pub spectral: SpectralData,
    pub noise: NoiseModel,
    pub eta: f64,
    pub quad_points: usize,
    pub mode: PsiMode,
    pub residual_params: Option<ResidualParams>,
    /// Quadratic representation `Psi(l) = l^T A l / 2` when the noise is
    /// Gaussian (zero on the null space).
    pub psi_quadratic: Option<DMatrix<f64>>,
}

impl RateFunction {
    /// Builds the rate function, precomputing the quadratic form when the
    /// noise admits one.
    pub fn new(
        spectral: SpectralData,
        noise: NoiseModel,
        eta: f64,
        quad_points: usize,
        mode: PsiMode,
        residual_params: Option<ResidualParams>,
    ) -> Result<Self> {
        if mode == PsiMode::WithResidual && residual_params.is_none() {
            return Err(Error::Domain("with-residual mode needs residual parameters".into()));
        }
        check_integrability(&spectral, eta)?;
        let psi_quadratic = psi_quadratic_form(&spectral, &noise, eta);
        Ok(Self { spectral, noise, eta, quad_points, mode, residual_params, psi_quadratic })
    }

    /// Evaluates `Psi(lambda)`, projecting onto the retained subspace.
    /// The flag reports whether the input had a null-space component.
    pub fn psi_flagged(&self, lambda: &DVector<f64>) -> Result<(f64, bool)> {
        let (coords, projected) = self.spectral.retained_coords(lambda);
        let value = self.psi_in_coords(&coords)?;
        Ok((value, projected))
    }

    pub fn psi(&self, lambda: &DVector<f64>) -> Result<f64> {
        self.psi_flagged(lambda).map(|(v, _)| v)
    }

    /// `Psi` on eigenbasis coordinates already restricted to the retained
    /// subspace (null entries must be zero).
    fn psi_in_coords(&self, coords: &DVector<f64>) -> Result<f64> {
        let leading = match &self.psi_quadratic {
            Some(a_psi) => {
                // A is stored in ambient coordinates; coords are eigenbasis.
                let lam = &self.spectral.q * coords;
                0.5 * (a_psi * &lam).dot(&lam)
            }
            None => self.psi_quadrature_coords(coords)?,
        };
        let residual = match self.mode {
            PsiMode::Leading => 0.0,
            PsiMode::WithResidual => {
                let params = self.residual_params.as_ref().expect("checked in new");
                params.residual(self.eta, coords.norm())
            }
        };
        Ok(leading + residual)
    }

    /// Gauss-Legendre evaluation of the spectral integral in eigenbasis
    /// coordinates.
    fn psi_quadrature_coords(&self, coords: &DVector<f64>) -> Result<f64> {
        psi_quadrature_with(&self.spectral, self.eta, self.quad_points, coords, |v| {
            self.noise
                .lmgf(v)
                .ok_or_else(|| Error::Domain("noise model has no closed-form LMGF".into()))
        })
    }

    /// The rate function `I(theta') = sup_lambda <theta', lambda> - Psi(lambda)`,
    /// restricted to the retained subspace.
    pub fn rate(&self, theta_prime: &DVector<f64>) -> Result<f64> {
        let (target, _) = self.spectral.retained_coords(theta_prime);
        self.rate_in_coords(&target)
    }

    /// Conjugate on eigenbasis coordinates (null entries zero).
    fn rate_in_coords(&self, target: &DVector<f64>) -> Result<f64> {
        if self.mode == PsiMode::Leading {
            if let Some(value) = self.rate_quadratic_coords(target) {
                return Ok(value);
            }
        }
        self.rate_numeric_coords(target)
    }

    /// Closed-form conjugate for the quadratic case:
    /// `I(u) = u^T A^+ u / 2` on the retained subspace.
    fn rate_quadratic_coords(&self, target: &DVector<f64>) -> Option<f64> {
        let a_psi = self.psi_quadratic.as_ref()?;
        let pinv = pseudo_inverse_retained(a_psi, &self.spectral)?;
        let u = &self.spectral.q * target;
        Some(0.5 * (&pinv * &u).dot(&u))
    }

    /// Numerical conjugate by gradient ascent with backtracking, multi-start
    /// from zero, the quadratic warm start when available, and random points.
    fn rate_numeric_coords(&self, target: &DVector<f64>) -> Result<f64> {
        let retained = self.spectral.retained_indices();
        if retained.is_empty() {
            return Ok(0.0);
        }
        let n = target.len();
        let mut starts: Vec<DVector<f64>> = vec![DVector::zeros(n)];
        if let (Some(a_psi), Some(pinv)) = (self.psi_quadratic.as_ref(), self.psi_quadratic.as_ref().and_then(|a| pseudo_inverse_retained(a, &self.spectral))) {
            let _ = a_psi;
            let u = &self.spectral.q * target;
            let warm = self.spectral.q.transpose() * (pinv * u);
            starts.push(warm);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xCA11);
        for _ in 0..4 {
            use rand::Rng;
            let mut r = DVector::zeros(n);
            for &i in &retained {
                r[i] = rng.gen_range(-1.0..1.0);
            }
            starts.push(r);
        }

        let objective = |lam: &DVector<f64>| -> Result<f64> {
            Ok(target.dot(lam) - self.psi_in_coords(lam)?)
        };
        let gradient = |lam: &DVector<f64>| -> Result<DVector<f64>> {
            let mut g = target - self.psi_grad_coords(lam)?;
            for (i, &is_null) in self.spectral.null_mask.iter().enumerate() {
                if is_null {
                    g[i] = 0.0;
                }
            }
            Ok(g)
        };

        let mut best = f64::NEG_INFINITY;
        for start in starts {
            let mut lam = start;
            let mut value = objective(&lam)?;
            for _ in 0..10_000 {
                let g = gradient(&lam)?;
                if g.norm() <= 1e-9 {
                    break;
                }
                // Backtracking line search on the concave objective.
                let mut step = 1.0;
                let mut improved = false;
                for _ in 0..60 {
                    let cand = &lam + &g * step;
                    if cand.norm() > CONJUGATE_NORM_GUARD {
                        return Ok(f64::INFINITY);
                    }
                    let cand_val = objective(&cand)?;
                    if cand_val > value + 0.5 * step * g.norm_squared() {
                        lam = cand;
                        value = cand_val;
                        improved = true;
                        break;
                    }
                    step *= 0.5;
                }
                if !improved {
                    break;
                }
            }
            if lam.norm() > CONJUGATE_NORM_GUARD {
                return Ok(f64::INFINITY);
            }
            best = best.max(value);
        }
        Ok(best.max(0.0))
    }

    /// Gradient of `Psi` in eigenbasis coordinates.
    fn psi_grad_coords(&self, coords: &DVector<f64>) -> Result<DVector<f64>> {
        if self.mode == PsiMode::Leading {
            if let Some(a_psi) = &self.psi_quadratic {
                let lam = &self.spectral.q * coords;
                return Ok(self.spectral.q.transpose() * (a_psi * lam));
            }
        }
        // Central differences on the retained coordinates.
        let h = 1e-6 * coords.norm().max(1.0);
        let mut g = DVector::zeros(coords.len());
        for i in self.spectral.retained_indices() {
            let mut p = coords.clone();
            p[i] += h;
            let mut m = coords.clone();
            m[i] -= h;
            g[i] = (self.psi_in_coords(&p)? - self.psi_in_coords(&m)?) / (2.0 * h);
        }
        Ok(g)
    }
}

/// Errors unless `2 eta rho_i > 1` for every retained eigenvalue.
fn check_integrability(spectral: &SpectralData, eta: f64) -> Result<()> {
    for i in spectral.retained_indices() {
        let rho = spectral.rho_eigs[i];
        if 2.0 * eta * rho <= 1.0 {
            return Err(Error::Domain(format!(
                "integrability violated at eigenvalue {i}: 2*eta*rho = {} <= 1",
                2.0 * eta * rho
            )));
        }
    }
    Ok(())
}

/// Quadratic form of `Psi` for Gaussian noise: in the eigenbasis,
/// `A~_{ij} = eta^2 Sigma~_{ij} / (eta (rho_i + rho_j) - 1)` on retained
/// indices, where `Sigma~ = Q^T Sigma Q`. Returns the ambient-coordinate
/// matrix `Q A~ Q^T`, or `None` when the noise has no Gaussian covariance.
fn psi_quadratic_form(spectral: &SpectralData, noise: &NoiseModel, eta: f64) -> Option<DMatrix<f64>> {
    let d = spectral.dim();
    let cov = noise.covariance(d)?;
    let cov_eig = spectral.q.transpose() * cov * &spectral.q;
    let retained = spectral.retained_indices();
    let mut a_tilde = DMatrix::zeros(d, d);
    for &i in &retained {
        for &j in &retained {
            let denom = eta * (spectral.rho_eigs[i] + spectral.rho_eigs[j]) - 1.0;
            if denom <= 0.0 {
                return None;
            }
            a_tilde[(i, j)] = eta * eta * cov_eig[(i, j)] / denom;
        }
    }
    Some(&spectral.q * a_tilde * spectral.q.transpose())
}

/// Pseudo-inverse of the quadratic form on the retained subspace.
fn pseudo_inverse_retained(a_psi: &DMatrix<f64>, spectral: &SpectralData) -> Option<DMatrix<f64>> {
    let retained = spectral.retained_indices();
    let r = retained.len();
    if r == 0 {
        return Some(DMatrix::zeros(a_psi.nrows(), a_psi.ncols()));
    }
    let a_eig = spectral.q.transpose() * a_psi * &spectral.q;
    let mut block = DMatrix::zeros(r, r);
    for (bi, &i) in retained.iter().enumerate() {
        for (bj, &j) in retained.iter().enumerate() {
            block[(bi, bj)] = a_eig[(i, j)];
        }
    }
    let inv = block.lu().try_inverse()?;
    let d = spectral.dim();
    let mut full = DMatrix::zeros(d, d);
    for (bi, &i) in retained.iter().enumerate() {
        for (bj, &j) in retained.iter().enumerate() {
            full[(i, j)] = inv[(bi, bj)];
        }
    }
    Some(&spectral.q * full * spectral.q.transpose())
}

/// Gauss-Legendre evaluation of `int_0^1 Lambda(eta Q D(x) Q^T lambda) dx`
/// given eigenbasis coordinates of `lambda` (null entries zero).
fn psi_quadrature_with<F>(
    spectral: &SpectralData,
    eta: f64,
    quad_points: usize,
    coords: &DVector<f64>,
    mut lmgf: F,
) -> Result<f64>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    check_integrability(spectral, eta)?;
    let (nodes, weights) = gauss_legendre_unit(quad_points);
    let retained = spectral.retained_indices();
    let mut total = 0.0;
    for (&x, &w) in nodes.iter().zip(&weights) {
        let mut scaled = DVector::zeros(coords.len());
        for &i in &retained {
            scaled[i] = x.powf(eta * spectral.rho_eigs[i] - 1.0) * coords[i];
        }
        let arg = (&spectral.q * scaled) * eta;
        total += w * lmgf(&arg)?;
    }
    Ok(total)
}

/// Standalone evaluation of `Psi` (leading term) by quadrature; the oracle
/// against which the closed form is cross-checked.
pub fn psi_quadrature(
    lambda: &DVector<f64>,
    spectral: &SpectralData,
    noise: &NoiseModel,
    eta: f64,
    quad_points: usize,
) -> Result<f64> {
    let (coords, _) = spectral.retained_coords(lambda);
    psi_quadrature_with(spectral, eta, quad_points, &coords, |v| {
        noise
            .lmgf(v)
            .ok_or_else(|| Error::Domain("noise model has no closed-form LMGF".into()))
    })
}

/// Closed-form `Psi` for isotropic Gaussian noise:
/// `sigma^2 eta^2 / 2 * sum_i (Q^T lambda)_i^2 / (2 eta rho_i - 1)`.
pub fn psi_gaussian_closed_form(
    lambda: &DVector<f64>,
    spectral: &SpectralData,
    sigma: f64,
    eta: f64,
) -> Result<f64> {
    check_integrability(spectral, eta)?;
    let (coords, _) = spectral.retained_coords(lambda);
    let mut total = 0.0;
    for i in spectral.retained_indices() {
        total += coords[i] * coords[i] / (2.0 * eta * spectral.rho_eigs[i] - 1.0);
    }
    Ok(0.5 * sigma * sigma * eta * eta * total)
}

/// A Borel region in difference coordinates `theta' = theta - theta*`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RegionSpec {
    /// `<a, theta'> >= b`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// `|theta' - center| >= radius`.
    BallComplement { center: Vec<f64>, radius: f64 },
    /// `lo <= theta' <= hi` componentwise.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Local quadratic model of the value gap:
    /// `theta'^T H(theta*) theta' / 2 >= delta`.
    GapSublevelComplement { delta: f64 },
}

impl RegionSpec {
    /// Membership test in raw difference coordinates. For the gap region the
    /// quadratic form is supplied through `spectral`.
    pub fn contains(&self, theta_prime: &DVector<f64>, spectral: Option<&SpectralData>) -> bool {
        match self {
            RegionSpec::HalfSpace { normal, offset } => {
                let a = DVector::from_vec(normal.clone());
                a.dot(theta_prime) >= *offset
            }
            RegionSpec::BallComplement { center, radius } => {
                let c = DVector::from_vec(center.clone());
                (theta_prime - c).norm() >= *radius
            }
            RegionSpec::Box { lo, hi } => theta_prime
                .iter()
                .enumerate()
                .all(|(i, &x)| x >= lo[i] && x <= hi[i]),
            RegionSpec::GapSublevelComplement { delta } => {
                let sp = spectral.expect("gap region needs spectral data");
                let (coords, _) = sp.retained_coords(theta_prime);
                let quad: f64 = sp
                    .retained_indices()
                    .iter()
                    .map(|&i| sp.rho_eigs[i] * coords[i] * coords[i])
                    .sum();
                0.5 * quad >= *delta
            }
        }
    }
}

/// `inf I(theta')` over the (closed) region. Exact constrained-quadratic
/// solutions where the quadratic form applies; projected multi-start local
/// minimization otherwise.
pub fn region_rate(region: &RegionSpec, rate_fn: &RateFunction) -> Result<f64> {
    let d = rate_fn.spectral.dim();
    // Regions containing the optimum decay at rate zero.
    if region.contains(&DVector::zeros(d), Some(&rate_fn.spectral)) {
        return Ok(0.0);
    }
    if rate_fn.mode == PsiMode::Leading {
        if let Some(a_psi) = rate_fn.psi_quadratic.clone() {
            if let Some(value) = region_rate_quadratic(region, rate_fn, &a_psi)? {
                return Ok(value);
            }
        }
    }
    region_rate_multistart(region, rate_fn, 16)
}

/// Exact solutions for the quadratic rate function, where available.
fn region_rate_quadratic(
    region: &RegionSpec,
    rate_fn: &RateFunction,
    a_psi: &DMatrix<f64>,
) -> Result<Option<f64>> {
    let sp = &rate_fn.spectral;
    match region {
        RegionSpec::HalfSpace { normal, offset } => {
            let a = DVector::from_vec(normal.clone());
            let retained_a = sp.project_retained(&a);
            // Any null-space component of the normal lets the constraint be
            // met at zero rate cost.
            if (&a - &retained_a).norm() > 1e-10 * a.norm().max(1.0) {
                return Ok(Some(0.0));
            }
            let quad = (a_psi * &a).dot(&a);
            if quad <= 0.0 {
                return Ok(Some(f64::INFINITY));
            }
            Ok(Some(offset * offset / (2.0 * quad)))
        }
        RegionSpec::BallComplement { center, radius } => {
            let c = DVector::from_vec(center.clone());
            if sp.retained_dim() < sp.dim() {
                // The null random walk escapes any ball: zero rate.
                return Ok(Some(0.0));
            }
            if c.norm() > 1e-12 {
                return Ok(None); // off-center: fall back to multi-start
            }
            // Cheapest escape direction is the largest eigenvalue of A.
            let eig = SymmetricEigen::new(a_psi.clone());
            let lam_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if lam_max <= 0.0 {
                return Ok(Some(f64::INFINITY));
            }
            Ok(Some(radius * radius / (2.0 * lam_max)))
        }
        RegionSpec::Box { .. } => {
            let pinv = match pseudo_inverse_retained(a_psi, sp) {
                Some(p) => p,
                None => return Ok(None),
            };
            // Convex QP over a convex box: projected gradient descent.
            let project = |v: &DVector<f64>| project_onto_region(region, v, sp);
            let value = projected_quadratic_min(&pinv, &project, sp)?;
            Ok(Some(value))
        }
        RegionSpec::GapSublevelComplement { delta } => {
            // In the eigenbasis both forms are simultaneously reducible:
            // minimize u^T A~^+ u / 2 subject to sum rho_i u_i^2 >= 2 delta.
            let retained = sp.retained_indices();
            if retained.is_empty() {
                return Ok(Some(f64::INFINITY));
            }
            let r = retained.len();
            let a_eig = sp.q.transpose() * a_psi * &sp.q;
            let mut block = DMatrix::zeros(r, r);
            for (bi, &i) in retained.iter().enumerate() {
                for (bj, &j) in retained.iter().enumerate() {
                    block[(bi, bj)] = a_eig[(i, j)];
                }
            }
            // Generalized Rayleigh quotient: value = delta / lambda_max(B),
            // B = D^{1/2} A~ D^{1/2} on the retained block.
            let dsqrt = DVector::from_fn(r, |bi, _| sp.rho_eigs[retained[bi]].max(0.0).sqrt());
            let b = DMatrix::from_fn(r, r, |i, j| dsqrt[i] * block[(i, j)] * dsqrt[j]);
            let eig = SymmetricEigen::new(b);
            let lam_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if lam_max <= 0.0 {
                return Ok(Some(f64::INFINITY));
            }
            Ok(Some(delta / lam_max))
        }
    }
}

/// Projected gradient descent for `u^T M u / 2` over a convex region.
fn projected_quadratic_min<F>(m: &DMatrix<f64>, project: &F, sp: &SpectralData) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = m.nrows();
    let lipschitz = SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0f64, |acc, x| acc.max(x.abs()))
        .max(1e-12);
    let step = 1.0 / lipschitz;
    let mut u = project(&DVector::zeros(d));
    for _ in 0..20_000 {
        let g = m * &u;
        let next = project(&(&u - &g * step));
        let moved = (&next - &u).norm();
        u = next;
        if moved < 1e-12 {
            break;
        }
    }
    let proj = sp.project_retained(&u);
    Ok(0.5 * (m * &proj).dot(&proj))
}

/// Euclidean-ish projection onto a region (exact for boxes and half-spaces,
/// radial for ball complements, eigen-metric scaling for gap regions).
fn project_onto_region(region: &RegionSpec, v: &DVector<f64>, sp: &SpectralData) -> DVector<f64> {
    match region {
        RegionSpec::HalfSpace { normal, offset } => {
            let a = DVector::from_vec(normal.clone());
            let slack = a.dot(v) - offset;
            if slack >= 0.0 {
                v.clone()
            } else {
                v - &a * (slack / a.norm_squared())
            }
        }
        RegionSpec::BallComplement { center, radius } => {
            let c = DVector::from_vec(center.clone());
            let diff = v - &c;
            let norm = diff.norm();
            if norm >= *radius {
                v.clone()
            } else if norm > 1e-14 {
                &c + diff * (*radius / norm)
            } else {
                let mut dir = DVector::zeros(v.len());
                dir[0] = *radius;
                &c + dir
            }
        }
        RegionSpec::Box { lo, hi } => {
            DVector::from_fn(v.len(), |i, _| v[i].clamp(lo[i], hi[i]))
        }
        RegionSpec::GapSublevelComplement { delta } => {
            let (mut coords, _) = sp.retained_coords(v);
            let quad: f64 = sp
                .retained_indices()
                .iter()
                .map(|&i| sp.rho_eigs[i] * coords[i] * coords[i])
                .sum();
            if 0.5 * quad >= *delta {
                return v.clone();
            }
            if quad <= 1e-16 {
                // Step along the top retained eigendirection.
                let i = sp.retained_indices()[0];
                coords[i] = (2.0 * delta / sp.rho_eigs[i].max(1e-12)).sqrt();
            } else {
                let scale = (2.0 * delta / quad).sqrt();
                coords *= scale;
            }
            &sp.q * coords
        }
    }
}

/// Multi-start projected local minimization of the rate function over the
/// region; used whenever no exact quadratic solution applies.
fn region_rate_multistart(region: &RegionSpec, rate_fn: &RateFunction, n_starts: usize) -> Result<f64> {
    let sp = &rate_fn.spectral;
    let d = sp.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x4e57);
    let mut best = f64::INFINITY;
    for start_idx in 0..n_starts {
        use rand::Rng;
        let raw = if start_idx == 0 {
            DVector::zeros(d)
        } else {
            DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))
        };
        let mut u = project_onto_region(region, &raw, sp);
        let mut value = rate_fn.rate(&u)?;
        let mut step = 0.25;
        for _ in 0..400 {
            // Numerical gradient of I restricted to the retained subspace.
            let h = 1e-5 * u.norm().max(1.0);
            let mut g = DVector::zeros(d);
            for i in sp.retained_indices() {
                let dir = sp.eigenvector(i);
                let up = rate_fn.rate(&(&u + &dir * h))?;
                let dn = rate_fn.rate(&(&u - &dir * h))?;
                g += dir * ((up - dn) / (2.0 * h));
            }
            let cand = project_onto_region(region, &(&u - &g * step), sp);
            let cand_val = rate_fn.rate(&cand)?;
            if cand_val < value - 1e-14 {
                u = cand;
                value = cand_val;
            } else {
                step *= 0.5;
                if step < 1e-10 {
                    break;
                }
            }
        }
        best = best.min(value);
    }
    Ok(best.max(0.0))
}

/// Outcome of a contraction-principle evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct ContractionValue {
    pub value: f64,
    /// Feasibility residual `|f(u) - w|` at the reported minimizer
    /// (zero on the inverse path).
    pub feasibility_residual: f64,
    pub feasible: bool,
}

/// Pushforward rate `I'(w) = inf {I(u) : f(u) = w}`. Uses the declared
/// inverse when present, otherwise the penalty method.
pub fn contract_rate(
    rate_fn: &RateFunction,
    map: &ParamMap,
    w: &DVector<f64>,
    n_starts: usize,
) -> Result<ContractionValue> {
    if map.has_inverse() {
        let u = map.inverse(w)?;
        let value = rate_fn.rate(&u)?;
        return Ok(ContractionValue { value, feasibility_residual: 0.0, feasible: true });
    }
    contract_rate_penalty(rate_fn, map, w, n_starts)
}

/// Penalty-method pushforward: minimizes `I(u) + rho_k |f(u) - w|^2` with
/// increasing `rho_k` over six rounds and `n_starts` multi-starts. Exposed
/// separately so invertible maps can be cross-checked against their
/// inverse-path values.
pub fn contract_rate_penalty(
    rate_fn: &RateFunction,
    map: &ParamMap,
    w: &DVector<f64>,
    n_starts: usize,
) -> Result<ContractionValue> {
    const FEASIBILITY_TOL: f64 = 1e-7;
    let d = rate_fn.spectral.dim();
    let rhos = [1e1, 10f64.powf(2.6), 10f64.powf(4.2), 10f64.powf(5.8), 10f64.powf(7.4), 1e9];
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e7a);
    let mut best: Option<(f64, f64)> = None; // (value, residual)

    for start_idx in 0..n_starts.max(1) {
        use rand::Rng;
        let mut u = if start_idx == 0 && map.has_inverse() {
            map.inverse(w).unwrap_or_else(|_| DVector::zeros(d))
        } else {
            DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))
        };
        for &rho in &rhos {
            let objective = |u: &DVector<f64>| -> Result<f64> {
                Ok(rate_fn.rate(u)? + rho * (map.forward(u) - w).norm_squared())
            };
            let mut value = objective(&u)?;
            let mut step = 1.0 / rho.max(1.0);
            for _ in 0..2000 {
                let h = 1e-6 * u.norm().max(1.0);
                let mut g = DVector::zeros(d);
                for i in 0..d {
                    let mut p = u.clone();
                    p[i] += h;
                    let mut m = u.clone();
                    m[i] -= h;
                    g[i] = (objective(&p)? - objective(&m)?) / (2.0 * h);
                }
                if g.norm() < 1e-11 * value.abs().max(1.0) {
                    break;
                }
                let mut improved = false;
                let mut local = step;
                for _ in 0..50 {
                    let cand = &u - &g * local;
                    let cand_val = objective(&cand)?;
                    if cand_val < value {
                        u = cand;
                        value = cand_val;
                        step = (local * 2.0).min(1.0);
                        improved = true;
                        break;
                    }
                    local *= 0.5;
                }
                if !improved {
                    break;
                }
            }
        }
        let residual = (map.forward(&u) - w).norm();
        let value = rate_fn.rate(&u)?;
        let better = match best {
            None => true,
            Some((bv, br)) => {
                if (residual < FEASIBILITY_TOL) != (br < FEASIBILITY_TOL) {
                    residual < FEASIBILITY_TOL
                } else {
                    value < bv
                }
            }
        };
        if better {
            best = Some((value, residual));
        }
    }
    let (value, residual) = best.expect("at least one start");
    Ok(ContractionValue {
        value,
        feasibility_residual: residual,
        feasible: residual < FEASIBILITY_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{hessian, shift_direction, soft_optimal};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn mdp_spectral() -> (SpectralData, f64) {
        let mdp = Mdp::random(2, 2, 0.9, 42);
        let tau = 0.2;
        let soft = soft_optimal(&mdp, tau, 1e-12, 1_000_000).unwrap();
        let h = hessian(&mdp, &soft.theta_star, tau, 0.0).unwrap();
        let sp = spectral(&h, 1e-6).unwrap();
        // eta with comfortable integrability margin on retained eigenvalues
        let rho_min = sp
            .retained_indices()
            .iter()
            .map(|&i| sp.rho_eigs[i])
            .fold(f64::INFINITY, f64::min);
        (sp, 2.0 / rho_min)
    }

    #[test]
    fn spectral_of_identity() {
        let sp = spectral(&DMatrix::<f64>::identity(4, 4), 1e-8).unwrap();
        assert!(sp.rho_eigs.iter().all(|&l| (l - 1.0).abs() < 1e-12));
        let qtq = sp.q.transpose() * &sp.q;
        assert!((qtq - DMatrix::<f64>::identity(4, 4)).amax() < 1e-8);
        assert_eq!(sp.retained_dim(), 4);
    }

    #[test]
    fn spectral_finds_shift_null_space() {
        let mdp = Mdp::random(2, 2, 0.9, 42);
        let tau = 0.2;
        let soft = soft_optimal(&mdp, tau, 1e-12, 1_000_000).unwrap();
        let h = hessian(&mdp, &soft.theta_star, tau, 0.0).unwrap();
        let sp = spectral(&h, 1e-6).unwrap();
        let nulls = sp.null_mask.iter().filter(|&&m| m).count();
        assert_eq!(nulls, 2, "expected exactly S = 2 null eigenvalues");
        // Shift directions live in the numerical null space.
        for s in 0..2 {
            let u = shift_direction(2, 2, s);
            let proj = sp.project_retained(&u);
            assert!(proj.norm() < 1e-4, "shift direction {s} leaks {}", proj.norm());
        }
        // Reconstruction identity.
        let rebuilt = &sp.q * DMatrix::from_diagonal(&sp.rho_eigs) * sp.q.transpose();
        assert!((&rebuilt - &h).norm() / h.norm() < 1e-8);
    }

    #[test]
    fn psi_zero_at_zero() {
        let (sp, eta) = mdp_spectral();
        let noise = NoiseModel::gaussian_isotropic(0.05);
        let rf = RateFunction::new(sp, noise, eta, 64, PsiMode::Leading, None).unwrap();
        assert_eq!(rf.psi(&DVector::zeros(4)).unwrap(), 0.0);
    }

    #[test]
    fn psi_scalar_closed_form() {
        // d = 1, Gaussian sigma, eigenvalue rho: Psi = sigma^2 eta^2 l^2 / (2(2 eta rho - 1)).
        let sp = spectral(&DMatrix::from_element(1, 1, 0.8), 1e-8).unwrap();
        let sigma = 0.3;
        let eta = 2.0;
        let noise = NoiseModel::gaussian_isotropic(sigma);
        let rf = RateFunction::new(sp.clone(), noise, eta, 64, PsiMode::Leading, None).unwrap();
        let l = DVector::from_vec(vec![1.7]);
        let expect = sigma * sigma * eta * eta * 1.7 * 1.7 / (2.0 * (2.0 * eta * 0.8 - 1.0));
        assert_relative_eq!(rf.psi(&l).unwrap(), expect, max_relative = 1e-12);
        assert_relative_eq!(
            psi_gaussian_closed_form(&l, &sp, sigma, eta).unwrap(),
            expect,
            max_relative = 1e-12
        );
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let (sp, eta) = mdp_spectral();
        let sigma = 0.05;
        let noise = NoiseModel::gaussian_isotropic(sigma);
        let rf = RateFunction::new(sp.clone(), noise.clone(), eta, 64, PsiMode::Leading, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let raw = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let lam = sp.project_retained(&raw);
            let closed = rf.psi(&lam).unwrap();
            let quad = psi_quadrature(&lam, &sp, &noise, eta, 64).unwrap();
            let denom = closed.abs().max(1e-30);
            assert!((closed - quad).abs() / denom < 1e-10, "closed {closed} vs quad {quad}");
        }
    }

    #[test]
    fn diagonal_noise_quadratic_matches_quadrature() {
        let (sp, eta) = mdp_spectral();
        let noise = NoiseModel::gaussian_diagonal(vec![0.03, 0.07, 0.05, 0.04]);
        let rf = RateFunction::new(sp.clone(), noise.clone(), eta, 64, PsiMode::Leading, None).unwrap();
        assert!(rf.psi_quadratic.is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let raw = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let lam = sp.project_retained(&raw);
            let closed = rf.psi(&lam).unwrap();
            let quad = psi_quadrature(&lam, &sp, &noise, eta, 64).unwrap();
            assert!((closed - quad).abs() / closed.abs().max(1e-30) < 1e-9);
        }
    }

    #[test]
    fn psi_midpoint_convexity() {
        let (sp, eta) = mdp_spectral();
        let noise = NoiseModel::gaussian_isotropic(0.05);
        let rf = RateFunction::new(sp.clone(), noise, eta, 64, PsiMode::Leading, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..1000 {
            let a = sp.project_retained(&DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0)));
            let b = sp.project_retained(&DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0)));
            let mid = (&a + &b) * 0.5;
            let lhs = rf.psi(&mid).unwrap();
            let rhs = 0.5 * (rf.psi(&a).unwrap() + rf.psi(&b).unwrap());
            assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn integrability_violation_is_reported() {
        let sp = spectral(&DMatrix::from_element(1, 1, 0.8), 1e-8).unwrap();
        // 2 * eta * rho = 0.8 < 1
        let err = RateFunction::new(sp, NoiseModel::gaussian_isotropic(0.1), 0.5, 64, PsiMode::Leading, None);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn rate_zero_at_zero_and_positive_on_sphere() {
        let (sp, eta) = mdp_spectral();
        let noise = NoiseModel::gaussian_isotropic(0.05);
        let rf = RateFunction::new(sp.clone(), noise, eta, 64, PsiMode::Leading, None).unwrap();
        assert_eq!(rf.rate(&DVector::zeros(4)).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        for _ in 0..50 {
            let raw = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let mut u = sp.project_retained(&raw);
            if u.norm() < 1e-6 {
                continue;
            }
            u /= u.norm();
            assert!(rf.rate(&u).unwrap() > 0.0);
        }
    }

    #[test]
    fn scalar_conjugate_pair() {
        // Psi(l) = a l^2 / 2  =>  I(x) = x^2 / (2a).
        let sp = spectral(&DMatrix::from_element(1, 1, 1.0), 1e-8).unwrap();
        let sigma = 0.4;
        let eta = 1.5;
        let noise = NoiseModel::gaussian_isotropic(sigma);
        let rf = RateFunction::new(sp, noise, eta, 64, PsiMode::Leading, None).unwrap();
        let a = sigma * sigma * eta * eta / (2.0 * eta - 1.0);
        let x = DVector::from_vec(vec![0.9]);
        assert_relative_eq!(rf.rate(&x).unwrap(), 0.81 / (2.0 * a), max_relative = 1e-9);
    }

    #[test]
    fn numeric_conjugate_matches_quadratic() {
        let (sp, eta) = mdp_spectral();
        let noise = NoiseModel::gaussian_isotropic(0.05);
        let rf = RateFunction::new(sp.clone(), noise, eta, 64, PsiMode::Leading, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..25 {
            let raw = DVector::from_fn(4, |_, _| rng.gen_range(-0.5..0.5));
            let u = sp.project_retained(&raw);
            let (coords, _) = sp.retained_coords(&u);
            let quad = rf.rate_quadratic_coords(&coords).unwrap();
            let numeric = rf.rate_numeric_coords(&coords).unwrap();
            assert!((quad - numeric).abs() / quad.abs().max(1e-12) < 1e-6, "quad {quad} numeric {numeric}");
        }
    }

    #[test]
    fn region_containing_origin_has_zero_rate() {
        let (sp, eta) = mdp_spectral();
        let rf = RateFunction::new(sp, NoiseModel::gaussian_isotropic(0.05), eta, 64, PsiMode::Leading, None).unwrap();
        let region = RegionSpec::HalfSpace { normal: vec![1.0, 0.0, 0.0, 0.0], offset: -0.5 };
        assert_eq!(region_rate(&region, &rf).unwrap(), 0.0);
    }

    #[test]
    fn halfspace_rate_closed_form() {
        let (sp, eta) = mdp_spectral();
        let rf = RateFunction::new(sp.clone(), NoiseModel::gaussian_isotropic(0.05), eta, 64, PsiMode::Leading, None).unwrap();
        let a = sp.eigenvector(0);
        let b = 0.07;
        let region = RegionSpec::HalfSpace { normal: a.iter().cloned().collect(), offset: b };
        let r = region_rate(&region, &rf).unwrap();
        let a_psi = rf.psi_quadratic.as_ref().unwrap();
        let expect = b * b / (2.0 * (a_psi * &a).dot(&a));
        assert_relative_eq!(r, expect, max_relative = 1e-10);
        // Cross-check against the generic multi-start path.
        let generic = region_rate_multistart(&region, &rf, 16).unwrap();
        assert_relative_eq!(r, generic, max_relative = 1e-4);
    }

    #[test]
    fn halfspace_null_normal_escapes_free() {
        let (sp, eta) = mdp_spectral();
        let rf = RateFunction::new(sp, NoiseModel::gaussian_isotropic(0.05), eta, 64, PsiMode::Leading, None).unwrap();
        let u = shift_direction(2, 2, 0);
        let region = RegionSpec::HalfSpace { normal: u.iter().cloned().collect(), offset: 0.4 };
        assert_eq!(region_rate(&region, &rf).unwrap(), 0.0);
    }

    #[test]
    fn region_monotone_under_inclusion() {
        let (sp, eta) = mdp_spectral();
        let rf = RateFunction::new(sp.clone(), NoiseModel::gaussian_isotropic(0.05), eta, 64, PsiMode::Leading, None).unwrap();
        let a = sp.eigenvector(0);
        let small = RegionSpec::HalfSpace { normal: a.iter().cloned().collect(), offset: 0.1 };
        let large = RegionSpec::HalfSpace { normal: a.iter().cloned().collect(), offset: 0.05 };
        // Shrinking the region (larger offset) never decreases the rate.
        assert!(region_rate(&small, &rf).unwrap() >= region_rate(&large, &rf).unwrap());
    }

    #[test]
    fn gap_region_rate_matches_direct_search() {
        let (sp, eta) = mdp_spectral();
        let rf = RateFunction::new(sp.clone(), NoiseModel::gaussian_isotropic(0.05), eta, 64, PsiMode::Leading, None).unwrap();
        let region = RegionSpec::GapSublevelComplement { delta: 1e-3 };
        let exact = region_rate(&region, &rf).unwrap();
        let generic = region_rate_multistart(&region, &rf, 16).unwrap();
        assert_relative_eq!(exact, generic, max_relative = 1e-3);
        assert!(exact > 0.0);
    }

    #[test]
    fn contraction_identity_and_scaling() {
        let (sp, eta) = mdp_spectral();
        let rf = RateFunction::new(sp.clone(), NoiseModel::gaussian_isotropic(0.05), eta, 64, PsiMode::Leading, None).unwrap();
        let identity = ParamMap::identity();
        let scaling = ParamMap::scale(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..100 {
            let w = sp.project_retained(&DVector::from_fn(4, |_, _| rng.gen_range(-0.5..0.5)));
            let direct = rf.rate(&w).unwrap();
            let via_id = contract_rate(&rf, &identity, &w, 4).unwrap();
            assert_relative_eq!(via_id.value, direct, max_relative = 1e-12);
            let via_scale = contract_rate(&rf, &scaling, &w, 4).unwrap();
            let half = rf.rate(&(&w * 0.5)).unwrap();
            assert_relative_eq!(via_scale.value, half, max_relative = 1e-9);
        }
    }

    #[test]
    fn contraction_penalty_matches_inverse_on_escort() {
        let (sp, eta) = mdp_spectral();
        let rf = RateFunction::new(sp.clone(), NoiseModel::gaussian_isotropic(0.05), eta, 64, PsiMode::Leading, None).unwrap();
        let escort = crate::parametrization::softmax_to_escort_map(2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..5 {
            let u = DVector::from_fn(4, |_, _| rng.gen_range(-0.4..0.4));
            let w = escort.forward(&u);
            let via_inverse = contract_rate(&rf, &escort, &w, 4).unwrap();
            let via_penalty = contract_rate_penalty(&rf, &escort, &w, 4).unwrap();
            assert!(via_penalty.feasible, "penalty residual {}", via_penalty.feasibility_residual);
            assert!(
                (via_penalty.value - via_inverse.value).abs() < 1e-6,
                "penalty {} vs inverse {}",
                via_penalty.value,
                via_inverse.value
            );
        }
    }

    #[test]
    fn contraction_rejects_out_of_range() {
        let (sp, eta) = mdp_spectral();
        let rf = RateFunction::new(sp, NoiseModel::gaussian_isotropic(0.05), eta, 64, PsiMode::Leading, None).unwrap();
        let escort = crate::parametrization::softmax_to_escort_map(2.0).unwrap();
        let w = DVector::from_vec(vec![1.0, -1.0, 1.0, 1.0]);
        assert!(contract_rate(&rf, &escort, &w, 4).is_err());
    }

    #[test]
    fn with_residual_mode_increases_psi_and_shrinks_rate() {
        let mdp = Mdp::random(2, 2, 0.9, 42);
        let tau = 0.2;
        let soft = soft_optimal(&mdp, tau, 1e-12, 1_000_000).unwrap();
        let h = hessian(&mdp, &soft.theta_star, tau, 0.0).unwrap();
        let sp = spectral(&h, 1e-6).unwrap();
        let rho_min = sp.retained_indices().iter().map(|&i| sp.rho_eigs[i]).fold(f64::INFINITY, f64::min);
        let eta = 2.0 / rho_min;
        let noise = NoiseModel::gaussian_isotropic(0.05);
        let constants = crate::theory::TheoryConstants {
            l1: 2.0,
            mu: 0.02,
            sigma: 0.05,
            c_universal: 2.0,
            c_m: 0.04,
            b0: 1.0,
            c0: 0.2,
            eta,
            t0: 10,
            k_const: 0.05,
            epsilon: 0.05,
            delta_init: 0.3,
            dim: 4,
            gap1: 0.05,
            binding_constraints: vec![],
        };
        let residual = ResidualParams::estimate(
            &mdp, tau, &soft, &h, &noise, &constants,
            &[1e-3, 1e-2, 0.05, 0.1, 0.3], 200, 5,
        )
        .unwrap();
        let leading = RateFunction::new(sp.clone(), noise.clone(), eta, 64, PsiMode::Leading, None).unwrap();
        let with_res = RateFunction::new(sp.clone(), noise, eta, 64, PsiMode::WithResidual, Some(residual)).unwrap();
        let lam = sp.project_retained(&DVector::from_vec(vec![0.5, -0.3, 0.2, 0.1]));
        assert!(with_res.psi(&lam).unwrap() >= leading.psi(&lam).unwrap());
        let u = sp.project_retained(&DVector::from_vec(vec![0.1, 0.05, -0.04, 0.08]));
        assert!(with_res.rate(&u).unwrap() <= leading.rate(&u).unwrap() + 1e-12);
    }
}
