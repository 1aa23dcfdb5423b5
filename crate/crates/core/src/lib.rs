//! Stochastic softmax policy gradient on entropy-regularized tabular MDPs,
//! with exponential tail bounds, limiting log-moment-generating functions,
//! Legendre-Fenchel rate functions, contraction-principle pushforwards, and
//! Monte Carlo validation of the predicted decay rates.

pub mod error;
pub mod mdp;
pub mod numerics;
pub mod optimizer;
pub mod theory;
pub mod parametrization;

pub use error::{Error, Result};
