//! Policy parametrizations and the continuous maps linking their parameter
//! spaces.
//!
//! Maps act on *difference* coordinates `u = theta - theta*`; the anchor in
//! the target space is supplied by the caller (typically the forward image
//! of `theta*`). Built-in maps are selected by name: `identity`,
//! `scale:<k>`, `escort:<p>`, `componentwise-exp:<k>`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{Policy, PolicyParams};

type VecMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// A continuous map between parameter difference spaces, with an optional
/// declared inverse when the map is bijective onto its range.
#[derive(Clone)]
pub struct ParamMap {
    name: String,
    forward: VecMap,
    inverse: Option<VecMap>,
    /// Checks that a point lies in the range of `forward` (used before
    /// applying the inverse).
    range_check: Option<Arc<dyn Fn(&DVector<f64>) -> bool + Send + Sync>>,
    domain_note: String,
}

impl std::fmt::Debug for ParamMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamMap")
            .field("name", &self.name)
            .field("invertible", &self.inverse.is_some())
            .field("domain_note", &self.domain_note)
            .finish()
    }
}

impl ParamMap {
    pub fn new(
        name: impl Into<String>,
        forward: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        domain_note: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            forward: Arc::new(forward),
            inverse: None,
            range_check: None,
            domain_note: domain_note.into(),
        }
    }

    pub fn with_inverse(
        mut self,
        inverse: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        range_check: impl Fn(&DVector<f64>) -> bool + Send + Sync + 'static,
    ) -> Self {
        self.inverse = Some(Arc::new(inverse));
        self.range_check = Some(Arc::new(range_check));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn domain_note(&self) -> &str {
        &self.domain_note
    }

    pub fn forward(&self, u: &DVector<f64>) -> DVector<f64> {
        (self.forward)(u)
    }

    pub fn has_inverse(&self) -> bool {
        self.inverse.is_some()
    }

    /// Applies the declared inverse, checking range membership first.
    pub fn inverse(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let inv = self
            .inverse
            .as_ref()
            .ok_or_else(|| Error::Domain(format!("map '{}' has no declared inverse", self.name)))?;
        if let Some(check) = &self.range_check {
            if !check(w) {
                return Err(Error::Domain(format!(
                    "point outside the range of map '{}' ({})",
                    self.name, self.domain_note
                )));
            }
        }
        Ok(inv(w))
    }

    /// Composition `other . self` (self first).
    pub fn compose(&self, other: &ParamMap) -> ParamMap {
        let f1 = self.forward.clone();
        let f2 = other.forward.clone();
        let name = format!("{} . {}", other.name, self.name);
        let mut composed = ParamMap::new(name, move |u| f2(&f1(u)), format!("{}; {}", self.domain_note, other.domain_note));
        if let (Some(i1), Some(i2), Some(c2)) = (self.inverse.clone(), other.inverse.clone(), other.range_check.clone()) {
            let c1 = self.range_check.clone();
            let i2_for_check = i2.clone();
            composed.inverse = Some(Arc::new(move |w| i1(&i2(w))));
            composed.range_check = Some(Arc::new(move |w: &DVector<f64>| {
                if !c2(w) {
                    return false;
                }
                match &c1 {
                    Some(c1) => c1(&i2_for_check(w)),
                    None => true,
                }
            }));
        }
        composed
    }

    pub fn identity() -> ParamMap {
        ParamMap::new("identity", |u| u.clone(), "all of R^d").with_inverse(|w| w.clone(), |_| true)
    }

    pub fn scale(k: f64) -> ParamMap {
        assert!(k != 0.0, "scale map requires a nonzero factor");
        ParamMap::new(format!("scale:{k}"), move |u| u * k, "all of R^d")
            .with_inverse(move |w| w / k, |_| true)
    }

    /// Componentwise `u -> exp(k*u)`, inverse `w -> log(w)/k` on the
    /// positive orthant.
    pub fn componentwise_exp(k: f64) -> ParamMap {
        assert!(k != 0.0, "componentwise-exp requires a nonzero rate");
        ParamMap::new(
            format!("componentwise-exp:{k}"),
            move |u| u.map(|x| (k * x).exp()),
            "range is the positive orthant",
        )
        .with_inverse(move |w| w.map(|x| x.ln() / k), |w| w.iter().all(|&x| x > 0.0))
    }

    /// Builds a named map: `identity`, `scale:<k>`, `escort:<p>`,
    /// `componentwise-exp:<k>`.
    pub fn by_name(spec: &str) -> Result<ParamMap> {
        let mut parts = spec.splitn(2, ':');
        let head = parts.next().unwrap_or_default();
        let arg = parts.next();
        let parse = |arg: Option<&str>, what: &str| -> Result<f64> {
            arg.ok_or_else(|| Error::Config(format!("map '{head}' needs a parameter")))?
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad {what} in map spec '{spec}'")))
        };
        match head {
            "identity" => Ok(ParamMap::identity()),
            "scale" => Ok(ParamMap::scale(parse(arg, "factor")?)),
            "escort" => {
                let p = parse(arg, "exponent")?;
                softmax_to_escort_map(p)
            }
            "componentwise-exp" => Ok(ParamMap::componentwise_exp(parse(arg, "rate")?)),
            other => Err(Error::Config(format!("unknown map '{other}'"))),
        }
    }
}

/// Row-wise softmax of the parameter matrix, with max subtraction.
pub fn softmax_policy(theta: &PolicyParams) -> Policy {
    let m = theta.matrix();
    let mut probs = DMatrix::zeros(m.nrows(), m.ncols());
    for s in 0..m.nrows() {
        let row_max = (0..m.ncols()).map(|a| m[(s, a)]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for a in 0..m.ncols() {
            let e = (m[(s, a)] - row_max).exp();
            probs[(s, a)] = e;
            sum += e;
        }
        for a in 0..m.ncols() {
            probs[(s, a)] /= sum;
        }
    }
    Policy::from_rows_unchecked(probs)
}

/// Escort policy: rows proportional to `|params|^p`, `p >= 1`.
pub fn escort_policy(params: &DMatrix<f64>, p: f64) -> Result<Policy> {
    if p < 1.0 {
        return Err(Error::Domain(format!("escort exponent must be >= 1, got {p}")));
    }
    let mut probs = DMatrix::zeros(params.nrows(), params.ncols());
    for s in 0..params.nrows() {
        let mut sum = 0.0;
        for a in 0..params.ncols() {
            let w = params[(s, a)].abs().powf(p);
            probs[(s, a)] = w;
            sum += w;
        }
        if sum == 0.0 {
            return Err(Error::Domain(format!("escort row {s} is all zeros")));
        }
        for a in 0..params.ncols() {
            probs[(s, a)] /= sum;
        }
    }
    Ok(Policy::from_rows_unchecked(probs))
}

/// The map from softmax to escort parameters, restricted to the positive
/// branch: forward `u -> exp(u/p)` componentwise, inverse `w -> p*log(w)`
/// on the positive orthant. Pushing a softmax parameter through `forward`
/// and then [`escort_policy`] reproduces its softmax policy.
pub fn softmax_to_escort_map(p: f64) -> Result<ParamMap> {
    if p < 1.0 {
        return Err(Error::Domain(format!("escort exponent must be >= 1, got {p}")));
    }
    Ok(ParamMap::new(
        format!("escort:{p}"),
        move |u| u.map(|x| (x / p).exp()),
        "positive branch; range is the positive orthant",
    )
    .with_inverse(move |w| w.map(|x| p * x.ln()), |w| w.iter().all(|&x| x > 0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetric_row() {
        let theta = PolicyParams::zeros(1, 2);
        let pi = softmax_policy(&theta);
        assert_relative_eq!(pi.prob(0, 0), 0.5);
        assert_relative_eq!(pi.prob(0, 1), 0.5);
    }

    #[test]
    fn softmax_ln3_row() {
        let theta = PolicyParams::new(DMatrix::from_row_slice(1, 2, &[3.0f64.ln(), 0.0])).unwrap();
        let pi = softmax_policy(&theta);
        assert_relative_eq!(pi.prob(0, 0), 0.75, max_relative = 1e-14);
        assert_relative_eq!(pi.prob(0, 1), 0.25, max_relative = 1e-14);
    }

    #[test]
    fn softmax_shift_invariance() {
        let theta = PolicyParams::new(DMatrix::from_row_slice(2, 3, &[0.1, -2.0, 1.4, 3.0, 3.0, -1.0])).unwrap();
        let shifted = PolicyParams::new(theta.matrix().map_with_location(|s, _, x| x + (s as f64 + 1.0) * 5.0)).unwrap();
        let a = softmax_policy(&theta);
        let b = softmax_policy(&shifted);
        assert!((a.probs() - b.probs()).amax() < 1e-14);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let theta = PolicyParams::new(DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-30.0..30.0))).unwrap();
            let pi = softmax_policy(&theta);
            for s in 0..3 {
                let sum: f64 = (0..4).map(|a| pi.prob(s, a)).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            assert!(pi.min_prob() > 0.0);
        }
    }

    #[test]
    fn escort_basic_rows() {
        let pi = escort_policy(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), 2.0).unwrap();
        assert_relative_eq!(pi.prob(0, 0), 0.5);
        let pi = escort_policy(&DMatrix::from_row_slice(1, 2, &[2.0, 1.0]), 2.0).unwrap();
        assert_relative_eq!(pi.prob(0, 0), 0.8);
        assert_relative_eq!(pi.prob(0, 1), 0.2);
    }

    #[test]
    fn escort_scale_invariance_per_row() {
        for w in [0.3, -2.0, 7.5] {
            let pi = escort_policy(&DMatrix::from_row_slice(1, 2, &[w, w]), 3.0).unwrap();
            assert_relative_eq!(pi.prob(0, 0), 0.5, max_relative = 1e-14);
        }
    }

    #[test]
    fn escort_rejects_zero_row() {
        assert!(escort_policy(&DMatrix::from_row_slice(1, 2, &[0.0, 0.0]), 2.0).is_err());
    }

    #[test]
    fn escort_map_fixed_points() {
        let map = softmax_to_escort_map(2.0).unwrap();
        let u = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        assert!((map.forward(&u) - DVector::from_element(3, 1.0)).amax() < 1e-15);
        let u = DVector::from_vec(vec![2.0 * 3.0f64.ln()]);
        assert_relative_eq!(map.forward(&u)[0], 3.0, max_relative = 1e-14);
    }

    #[test]
    fn escort_map_reproduces_softmax_policy() {
        let map = softmax_to_escort_map(2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let theta = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-2.0..2.0));
            let w = map.forward(&crate::numerics::flatten(&theta));
            let escort_params = crate::numerics::unflatten(&w, 2, 3);
            let via_escort = escort_policy(&escort_params, 2.0).unwrap();
            let direct = softmax_policy(&PolicyParams::new(theta).unwrap());
            assert!((via_escort.probs() - direct.probs()).amax() < 1e-9);
        }
    }

    #[test]
    fn inverse_rejects_out_of_range() {
        let map = softmax_to_escort_map(2.0).unwrap();
        let w = DVector::from_vec(vec![1.0, -0.5]);
        assert!(map.inverse(&w).is_err());
    }

    #[test]
    fn round_trip_on_sampled_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for spec in ["identity", "scale:2.5", "escort:2", "componentwise-exp:0.5"] {
            let map = ParamMap::by_name(spec).unwrap();
            for _ in 0..1000 {
                let u = DVector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0));
                let w = map.forward(&u);
                let back = map.inverse(&w).unwrap();
                assert!((back - &u).amax() < 1e-9, "round trip failed for {spec}");
            }
        }
    }

    #[test]
    fn composition_matches_pointwise() {
        let f = ParamMap::scale(2.0);
        let g = ParamMap::componentwise_exp(1.0);
        let fg = f.compose(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let u = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let expect = g.forward(&f.forward(&u));
            assert!((fg.forward(&u) - &expect).amax() < 1e-12);
            let back = fg.inverse(&expect).unwrap();
            assert!((back - &u).amax() < 1e-9);
        }
    }

    #[test]
    fn by_name_rejects_unknown() {
        assert!(ParamMap::by_name("mystery:3").is_err());
        assert!(ParamMap::by_name("scale").is_err());
    }
}
