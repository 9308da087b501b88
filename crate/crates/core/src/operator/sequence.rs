use std::ops::Index;

use nalgebra::DVector;

use super::Norm;
use crate::error::{check_dim, Result, SlsError};

/// A finite-horizon sequence `(x_0, …, x_H)` of vectors in ℝⁿ.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    dim: usize,
    values: Vec<DVector<f64>>,
}

impl Sequence {
    pub fn zeros(dim: usize, horizon: usize) -> Self {
        Self {
            dim,
            values: vec![DVector::zeros(dim); horizon + 1],
        }
    }

    pub fn new(dim: usize, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.is_empty() {
            return Err(SlsError::InvalidArgument(
                "a sequence needs at least one time step".into(),
            ));
        }
        for v in &values {
            check_dim("Sequence::new", dim, v.len())?;
        }
        Ok(Self { dim, values })
    }

    /// Scalar sequence from a slice of samples.
    pub fn from_scalars(samples: &[f64]) -> Self {
        assert!(!samples.is_empty(), "empty scalar sequence");
        Self {
            dim: 1,
            values: samples.iter().map(|&s| DVector::from_element(1, s)).collect(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        Self::new(dim, rows.iter().map(|r| DVector::from_column_slice(r)).collect())
    }

    pub fn from_fn(dim: usize, horizon: usize, mut f: impl FnMut(usize) -> DVector<f64>) -> Self {
        let values = (0..=horizon)
            .map(|t| {
                let v = f(t);
                assert_eq!(v.len(), dim, "Sequence::from_fn produced wrong dimension");
                v
            })
            .collect();
        Self { dim, values }
    }

    /// `direction` placed at time `at`, zero elsewhere.
    pub fn impulse(horizon: usize, at: usize, direction: DVector<f64>) -> Self {
        let mut s = Self::zeros(direction.len(), horizon);
        if at <= horizon {
            s.values[at] = direction;
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Last time index `H`; the sequence holds `H + 1` values.
    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn into_values(self) -> Vec<DVector<f64>> {
        self.values
    }

    pub fn get(&self, t: usize) -> Option<&DVector<f64>> {
        self.values.get(t)
    }

    pub fn set(&mut self, t: usize, value: DVector<f64>) -> Result<()> {
        check_dim("Sequence::set", self.dim, value.len())?;
        let horizon = self.horizon();
        let slot = self.values.get_mut(t).ok_or(SlsError::HorizonMismatch {
            context: "Sequence::set",
            expected: horizon,
            actual: t,
        })?;
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.values.iter()
    }

    /// The first `len` values as a new sequence.
    pub fn prefix(&self, len: usize) -> Self {
        Self {
            dim: self.dim,
            values: self.values[..len.clamp(1, self.values.len())].to_vec(),
        }
    }

    /// The truncation `P^τ`: values after `tau` are replaced by zero.
    pub fn truncate(&self, tau: usize) -> Self {
        let mut out = self.clone();
        for v in out.values.iter_mut().skip(tau + 1) {
            v.fill(0.0);
        }
        out
    }

    /// Sequence ℓp norm built over the vector norm `vec_norm`.
    pub fn norm(&self, p: Norm, vec_norm: Norm) -> f64 {
        let mags = self.values.iter().map(|v| vec_norm.of_vector(v));
        match p {
            Norm::One => mags.sum(),
            Norm::Two => mags.map(|m| m * m).sum::<f64>().sqrt(),
            Norm::Inf => mags.fold(0.0, f64::max),
        }
    }

    /// Running truncated norms `s_τ = ‖P^τ x‖_p` for τ = 0..H.
    pub fn running_norms(&self, p: Norm, vec_norm: Norm) -> Vec<f64> {
        let mut acc = 0.0_f64;
        self.values
            .iter()
            .map(|v| {
                let m = vec_norm.of_vector(v);
                match p {
                    Norm::One => {
                        acc += m;
                        acc
                    }
                    Norm::Two => {
                        acc += m * m;
                        acc.sqrt()
                    }
                    Norm::Inf => {
                        acc = acc.max(m);
                        acc
                    }
                }
            })
            .collect()
    }

    pub fn zip_with(
        &self,
        other: &Sequence,
        f: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    ) -> Result<Sequence> {
        check_dim("Sequence::zip_with", self.dim, other.dim)?;
        if self.len() != other.len() {
            return Err(SlsError::HorizonMismatch {
                context: "Sequence::zip_with",
                expected: self.horizon(),
                actual: other.horizon(),
            });
        }
        Ok(Sequence {
            dim: self.dim,
            values: self.values.iter().zip(&other.values).map(|(a, b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Sequence) -> Result<Sequence> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Sequence) -> Result<Sequence> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Sequence {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Sequence {
        let values: Vec<_> = self.values.iter().map(f).collect();
        let dim = values[0].len();
        Sequence { dim, values }
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Sequence) -> f64 {
        if self.dim != other.dim || self.len() != other.len() {
            return f64::INFINITY;
        }
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

impl Index<usize> for Sequence {
    type Output = DVector<f64>;

    fn index(&self, t: usize) -> &DVector<f64> {
        &self.values[t]
    }
}
