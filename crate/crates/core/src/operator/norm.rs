use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::SlsError;

/// Choice of finite-dimensional vector norm, sequence norm exponent, or the
/// induced matrix norm built on top of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "1")]
    One,
    #[default]
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Inf,
}

impl Norm {
    pub const ALL: [Norm; 3] = [Norm::One, Norm::Two, Norm::Inf];

    pub fn of_vector(self, v: &DVector<f64>) -> f64 {
        match self {
            Norm::One => v.iter().map(|x| x.abs()).sum(),
            Norm::Two => v.norm(),
            Norm::Inf => v.iter().fold(0.0, |acc, x| acc.max(x.abs())),
        }
    }

    /// Induced matrix norm `sup |Mx| / |x|` for this vector norm.
    ///
    /// The 1- and ∞-norms are exact column/row sums. The 2-norm is the largest
    /// singular value, found by power iteration on `MᵀM`.
    pub fn induced(self, m: &DMatrix<f64>) -> f64 {
        match self {
            Norm::One => (0..m.ncols())
                .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0, f64::max),
            Norm::Inf => (0..m.nrows())
                .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0, f64::max),
            Norm::Two => spectral_norm(m, 1e-12, 10_000),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Norm::One => f.write_str("1"),
            Norm::Two => f.write_str("2"),
            Norm::Inf => f.write_str("inf"),
        }
    }
}

impl FromStr for Norm {
    type Err = SlsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "one" | "l1" => Ok(Norm::One),
            "2" | "two" | "l2" => Ok(Norm::Two),
            "inf" | "infinity" | "linf" | "∞" => Ok(Norm::Inf),
            other => Err(SlsError::Parse(format!("unknown norm `{other}`"))),
        }
    }
}

/// Largest singular value of `m` via power iteration on the Gram matrix.
pub fn spectral_norm(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = m.transpose() * m;
    let n = gram.nrows();
    // Start off-axis so no singular direction is orthogonal to the seed by symmetry.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * (i as f64 + 1.0).sqrt());
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= tol * next.abs().max(1e-300) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}
