//! Small shared numerical routines: flattening conventions, power iteration,
//! Gauss-Legendre nodes, and least-squares line fits.
//!
//! Flattening convention: an `S x A` grid maps to a vector of dimension
//! `d = S*A` in row-major order, index `s * A + a`. Every module in this
//! crate that moves between grid and vector coordinates goes through
//! [`flatten`] / [`unflatten`] so the convention cannot drift.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major flatten of an `S x A` matrix into a `d = S*A` vector.
pub fn flatten(m: &DMatrix<f64>) -> DVector<f64> {
    let (rows, cols) = m.shape();
    DVector::from_iterator(rows * cols, (0..rows).flat_map(|s| (0..cols).map(move |a| (s, a))).map(|(s, a)| m[(s, a)]))
}

/// Inverse of [`flatten`].
pub fn unflatten(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), rows * cols, "dimension mismatch in unflatten");
    DMatrix::from_fn(rows, cols, |s, a| v[s * cols + a])
}

/// Largest absolute eigenvalue of a symmetric matrix by power iteration.
///
/// Runs until the Rayleigh quotient stabilizes to `tol` (relative) or
/// `max_iter` is hit, whichever comes first. A fixed seed keeps the start
/// vector deterministic across calls.
pub fn spectral_norm_sym(h: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let n = h.nrows();
    assert_eq!(n, h.ncols(), "spectral_norm_sym expects a square matrix");
    if n == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ n as u64);
    let mut v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let nv = v.norm();
    if nv == 0.0 {
        return 0.0;
    }
    v /= nv;
    let mut lambda = 0.0f64;
    for _ in 0..max_iter {
        let hv = h * &v;
        let norm = hv.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = hv / norm;
        if (next - lambda).abs() <= tol * next.max(1.0) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `(0, 1)`.
///
/// Roots of the Legendre polynomial on `[-1, 1]` are found by Newton
/// iteration from the Chebyshev initial guess, then affinely mapped to the
/// unit interval. Exact for polynomials up to degree `2n - 1`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev guess for the i-th root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // Map [-1, 1] -> [0, 1]: node (x+1)/2, weight w/2. Roots come out in
        // descending order of x; store symmetric pairs.
        nodes[i] = (1.0 - x) / 2.0;
        nodes[n - 1 - i] = (1.0 + x) / 2.0;
        weights[i] = w / 2.0;
        weights[n - 1 - i] = w / 2.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Ordinary least squares fit of `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Euclidean norm of the residual vector.
    pub residual_norm: f64,
    /// Standard error of the slope estimate (needs >= 3 points).
    pub slope_stderr: f64,
    pub n_points: usize,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return Err(Error::Estimation(format!("line fit needs >= 2 points, got {n}")));
    }
    let nf = n as f64;
    let mean_x = xs.iter().sum::<f64>() / nf;
    let mean_y = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Estimation("degenerate abscissae in line fit".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - (slope * x + intercept)).powi(2)).sum();
    let slope_stderr = if n > 2 { (rss / (nf - 2.0) / sxx).sqrt() } else { f64::NAN };
    Ok(LineFit { slope, intercept, residual_norm: rss.sqrt(), slope_stderr, n_points: n })
}

/// Draw a point uniformly from the ball of given radius around `center`.
pub fn sample_in_ball(center: &DVector<f64>, radius: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let d = center.len();
    let mut dir = DVector::from_fn(d, |_, _| {
        let u: f64 = rng.gen::<f64>();
        let v: f64 = rng.gen::<f64>();
        // Box-Muller
        (-2.0 * u.max(1e-300).ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    });
    let norm = dir.norm();
    if norm > 0.0 {
        dir /= norm;
    }
    let r = radius * rng.gen::<f64>().powf(1.0 / d as f64);
    center + dir * r
}
